//! Dense rank-4 tensors (NCHW, row-major, f64) and their binary format.
//!
//! `Tensor4` is a value type: cheap to clone (the buffer is shared), mutated
//! only through `data_mut`, which copies on write when the buffer is shared.
//!
//! On-disk format: magic `SBT4`, four little-endian u32 dims (n, c, h, w),
//! then n*c*h*w little-endian f64 values. Round-trips are bit-exact.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::rng::SbRng;

pub const TENSOR_MAGIC: [u8; 4] = *b"SBT4";

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Shape4, got: Shape4 },
    #[error("buffer holds {got} values but shape {shape:?} needs {need}")]
    LenMismatch { shape: Shape4, got: usize, need: usize },
    #[error("bad magic {0:?}, not a tensor file")]
    BadMagic([u8; 4]),
    #[error("dimension {0} does not fit in u32")]
    DimTooLarge(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub fn elems(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat index of (n, c, h, w); w varies fastest.
    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && h < self.h && w < self.w);
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug)]
pub struct Tensor4 {
    shape: Shape4,
    data: Arc<Vec<f64>>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 { shape, data: Arc::new(vec![0.0; shape.elems()]) }
    }

    pub fn filled(shape: Shape4, v: f64) -> Self {
        Tensor4 { shape, data: Arc::new(vec![v; shape.elems()]) }
    }

    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != shape.elems() {
            return Err(TensorError::LenMismatch { shape, got: data.len(), need: shape.elems() });
        }
        Ok(Tensor4 { shape, data: Arc::new(data) })
    }

    pub fn random_normal(shape: Shape4, mean: f64, sd: f64, rng: &mut SbRng) -> Self {
        let data = (0..shape.elems()).map(|_| rng.normal(mean, sd)).collect();
        Tensor4 { shape, data: Arc::new(data) }
    }

    pub fn random_uniform(shape: Shape4, lo: f64, hi: f64, rng: &mut SbRng) -> Self {
        let data = (0..shape.elems()).map(|_| rng.uniform(lo, hi)).collect();
        Tensor4 { shape, data: Arc::new(data) }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.at(n, c, h, w)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        let data = self.data.iter().map(|&x| f(x)).collect();
        Tensor4 { shape: self.shape, data: Arc::new(data) }
    }

    pub fn zip_map(&self, other: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Result<Tensor4, TensorError> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor4 { shape: self.shape, data: Arc::new(data) })
    }

    /// self += alpha * other
    pub fn add_scaled(&mut self, other: &Tensor4, alpha: f64) -> Result<(), TensorError> {
        self.check_same_shape(other)?;
        let other = other.data.clone();
        for (a, &b) in self.data_mut().iter_mut().zip(other.iter()) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in self.data_mut() {
            *a *= alpha;
        }
    }

    pub fn fill(&mut self, v: f64) {
        for a in self.data_mut() {
            *a = v;
        }
    }

    pub fn dot(&self, other: &Tensor4) -> Result<f64, TensorError> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(other.data.iter()).map(|(&a, &b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn abs_max(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Exact equality, including the shape. NaN compares unequal.
    pub fn bit_eq(&self, other: &Tensor4) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(other.data.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn check_same_shape(&self, other: &Tensor4) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch { expected: self.shape, got: other.shape });
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), TensorError> {
        w.write_all(&TENSOR_MAGIC)?;
        for dim in [self.shape.n, self.shape.c, self.shape.h, self.shape.w] {
            let d = u32::try_from(dim).map_err(|_| TensorError::DimTooLarge(dim))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in self.data.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Tensor4, TensorError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != TENSOR_MAGIC {
            return Err(TensorError::BadMagic(magic));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
        let mut data = vec![0.0f64; shape.elems()];
        let mut b = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        Ok(Tensor4 { shape, data: Arc::new(data) })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TensorError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor4, TensorError> {
        Tensor4::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_is_row_major_w_fastest() {
        let s = Shape4::new(2, 3, 4, 5);
        assert_eq!(s.at(0, 0, 0, 0), 0);
        assert_eq!(s.at(0, 0, 0, 1), 1);
        assert_eq!(s.at(0, 0, 1, 0), 5);
        assert_eq!(s.at(0, 1, 0, 0), 20);
        assert_eq!(s.at(1, 0, 0, 0), 60);
        assert_eq!(s.at(1, 2, 3, 4), 119);
        assert_eq!(s.elems(), 120);
    }

    #[test]
    fn from_vec_rejects_wrong_len() {
        let err = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![0.0; 3]).unwrap_err();
        assert!(matches!(err, TensorError::LenMismatch { got: 3, need: 4, .. }));
    }

    #[test]
    fn clone_is_cow() {
        let mut a = Tensor4::zeros(Shape4::new(1, 1, 1, 2));
        let b = a.clone();
        a.data_mut()[0] = 7.0;
        assert_eq!(a.at(0, 0, 0, 0), 7.0);
        assert_eq!(b.at(0, 0, 0, 0), 0.0);
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let vals = vec![0.1, -0.0, 1e-300, f64::MIN_POSITIVE, -1.5e17, 3.0f64.sqrt(), 0.0, 42.0];
        let t = Tensor4::from_vec(Shape4::new(2, 1, 2, 2), vals).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SBT4");
        assert_eq!(buf.len(), 4 + 16 + 8 * 8);
        let back = Tensor4::read_from(&mut &buf[..]).unwrap();
        assert!(back.bit_eq(&t));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00".to_vec();
        match Tensor4::read_from(&mut &buf[..]) {
            Err(TensorError::BadMagic(m)) => assert_eq!(&m, b"NOPE"),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_io_error() {
        let t = Tensor4::filled(Shape4::new(1, 1, 2, 2), 1.0);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(Tensor4::read_from(&mut &buf[..]), Err(TensorError::Io(_))));
    }

    #[test]
    fn axpy_and_dot() {
        let a = Tensor4::from_vec(Shape4::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor4::from_vec(Shape4::new(1, 1, 1, 3), vec![4.0, 5.0, 6.0]).unwrap();
        let mut c = a.clone();
        c.add_scaled(&b, 2.0).unwrap();
        assert_eq!(c.data(), &[9.0, 12.0, 15.0]);
        assert_eq!(a.dot(&b).unwrap(), 32.0);
        let bad = Tensor4::zeros(Shape4::new(1, 1, 3, 1));
        assert!(a.dot(&bad).is_err());
    }
}
