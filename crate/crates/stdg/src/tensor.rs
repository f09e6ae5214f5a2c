//! Dense row-major tensors of 64-bit reals, plus the on-disk tensor format.
//!
//! `Tensor` is the universal numeric carrier for the whole crate: images,
//! depth maps, heatmaps, relation fields and network parameters all travel
//! as shaped `f64` buffers. Values are expected to stay finite; detection
//! of NaN/Inf is an explicit operation ([`Tensor::assert_finite`]), never a
//! silent filter.
//!
//! The file format (extension `.stdg`) is:
//! magic `STDG`, version byte `0x01`, dtype byte (`0x01` = f64, `0x02` = f32),
//! rank byte, rank little-endian `u32` dims, then the raw little-endian
//! row-major payload.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "tensor data length {} does not match shape {:?} (product {})",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::shape_mismatch("reshape", shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(c * self.shape[1] + i) * self.shape[2] + j]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.rank(), 3);
        let idx = (c * self.shape[1] + i) * self.shape[2] + j;
        self.data[idx] = v;
    }

    #[inline]
    pub fn at4(&self, a: usize, b: usize, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 4);
        self.data[((a * self.shape[1] + b) * self.shape[2] + i) * self.shape[3] + j]
    }

    #[inline]
    pub fn set4(&mut self, a: usize, b: usize, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.rank(), 4);
        let idx = ((a * self.shape[1] + b) * self.shape[2] + i) * self.shape[3] + j;
        self.data[idx] = v;
    }

    /// Global L2 norm of the buffer.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    /// Error out if any element is NaN or infinite.
    pub fn assert_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite value {v} at flat index {i} in {context}"
                )));
            }
        }
        Ok(())
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

const MAGIC: &[u8; 4] = b"STDG";
const FORMAT_VERSION: u8 = 0x01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn byte(self) -> u8 {
        match self {
            DType::F64 => 0x01,
            DType::F32 => 0x02,
        }
    }
}

/// Write a tensor in the repo tensor format.
pub fn write_tensor(path: &Path, tensor: &Tensor, dtype: DType) -> Result<()> {
    let mut buf: Vec<u8> =
        Vec::with_capacity(4 + 3 + 4 * tensor.rank() + 8 * tensor.len());
    buf.extend_from_slice(MAGIC);
    buf.push(FORMAT_VERSION);
    buf.push(dtype.byte());
    if tensor.rank() > u8::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "tensor rank {} exceeds format limit",
            tensor.rank()
        )));
    }
    buf.push(tensor.rank() as u8);
    for &dim in tensor.shape() {
        if dim > u32::MAX as usize {
            return Err(Error::InvalidArgument(format!("dimension {dim} exceeds u32")));
        }
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    match dtype {
        DType::F64 => {
            for v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::F32 => {
            for v in tensor.data() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Read a tensor in the repo tensor format. f32 payloads widen to f64.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_tensor(&bytes).map_err(|msg| {
        Error::Data(format!("{}: {msg}", path.display()))
    })
}

fn parse_tensor(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < 7 {
        return Err("truncated tensor file".into());
    }
    if &bytes[0..4] != MAGIC {
        return Err("bad magic (not a tensor file)".into());
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(format!("unsupported format version {}", bytes[4]));
    }
    let dtype = match bytes[5] {
        0x01 => DType::F64,
        0x02 => DType::F32,
        other => return Err(format!("unknown dtype byte {other:#04x}")),
    };
    let rank = bytes[6] as usize;
    let header_end = 7 + 4 * rank;
    if bytes.len() < header_end {
        return Err("truncated dimension table".into());
    }
    let mut shape = Vec::with_capacity(rank);
    for d in 0..rank {
        let off = 7 + 4 * d;
        let dim = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        shape.push(dim);
    }
    let count: usize = shape.iter().product();
    let elem = match dtype {
        DType::F64 => 8,
        DType::F32 => 4,
    };
    if bytes.len() != header_end + count * elem {
        return Err(format!(
            "payload length {} does not match shape {:?}",
            bytes.len() - header_end,
            shape
        ));
    }
    let mut data = Vec::with_capacity(count);
    match dtype {
        DType::F64 => {
            for i in 0..count {
                let off = header_end + 8 * i;
                data.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
            }
        }
        DType::F32 => {
            for i in 0..count {
                let off = header_end + 4 * i;
                data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
            }
        }
    }
    Ok(Tensor {
        shape,
        data,
    })
}
