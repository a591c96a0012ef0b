//! Dense NCHW single-precision tensors and the `FCW1` binary tensor format.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

/// Magic bytes at the start of every tensor file.
pub const FCW_MAGIC: &[u8; 4] = b"FCW1";
/// The only tensor file version this crate reads or writes.
pub const FCW_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("index ({0}, {1}, {2}, {3}) out of bounds for shape {4}")]
    OutOfBounds(usize, usize, usize, usize, Shape),
    #[error("invalid shape {0}: every dimension must be at least 1")]
    ZeroDim(Shape),
    #[error("data length {len} does not match shape {shape} (expected {expected})")]
    LengthMismatch {
        shape: Shape,
        len: usize,
        expected: usize,
    },
    #[error("bad magic bytes {0:?}, expected \"FCW1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported tensor file version {0}")]
    BadVersion(u32),
    #[error("tensor file truncated or oversized: header declares {expected} values, found {found} bytes of payload")]
    PayloadLength { expected: usize, found: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Tensor dimensions in NCHW order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one image (`c·h·w`).
    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn with_batch(self, n: usize) -> Self {
        Self { n, ..self }
    }

    fn validate(self) -> Result<Self, TensorError> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            Err(TensorError::ZeroDim(self))
        } else {
            Ok(self)
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Zero rows/columns added around every spatial plane.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PaddingSpec {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl PaddingSpec {
    pub const fn uniform(p: usize) -> Self {
        Self {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.top == 0 && self.bottom == 0 && self.left == 0 && self.right == 0
    }
}

/// A dense `n × c × h × w` array of `f32` in row-major NCHW order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4D {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor4D {
    pub fn zeros(shape: Shape) -> Result<Self, TensorError> {
        let shape = shape.validate()?;
        Ok(Self {
            shape,
            data: vec![0.0; shape.len()],
        })
    }

    pub fn filled(shape: Shape, value: f32) -> Result<Self, TensorError> {
        let shape = shape.validate()?;
        Ok(Self {
            shape,
            data: vec![value; shape.len()],
        })
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self, TensorError> {
        let shape = shape.validate()?;
        if data.len() != shape.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
                expected: shape.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize, l: usize) -> usize {
        let Shape { c, h, w, .. } = self.shape;
        ((i * c + j) * h + k) * w + l
    }

    fn check(&self, i: usize, j: usize, k: usize, l: usize) -> Result<usize, TensorError> {
        let s = self.shape;
        if i < s.n && j < s.c && k < s.h && l < s.w {
            Ok(self.offset(i, j, k, l))
        } else {
            Err(TensorError::OutOfBounds(i, j, k, l, s))
        }
    }

    pub fn at(&self, i: usize, j: usize, k: usize, l: usize) -> Result<f32, TensorError> {
        self.check(i, j, k, l).map(|o| self.data[o])
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, v: f32) -> Result<(), TensorError> {
        let o = self.check(i, j, k, l)?;
        self.data[o] = v;
        Ok(())
    }

    /// The `h × w` plane of channel `j` in image `i`.
    pub fn plane(&self, i: usize, j: usize) -> &[f32] {
        let start = self.offset(i, j, 0, 0);
        &self.data[start..start + self.shape.plane_len()]
    }

    /// All channels of image `i`.
    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.shape.image_len();
        &self.data[i * len..(i + 1) * len]
    }

    /// Images `start..start + count` as a new tensor.
    pub fn batch_slice(&self, start: usize, count: usize) -> Result<Self, TensorError> {
        let len = self.shape.image_len();
        let end = start + count;
        if count == 0 || end > self.shape.n {
            return Err(TensorError::OutOfBounds(end, 0, 0, 0, self.shape));
        }
        Self::from_vec(
            self.shape.with_batch(count),
            self.data[start * len..end * len].to_vec(),
        )
    }

    /// Reinterpret the data with a new shape of identical length.
    pub fn reshape(self, shape: Shape) -> Result<Self, TensorError> {
        Self::from_vec(shape, self.data)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn read_fcw(mut r: impl Read) -> Result<Self, TensorError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FCW_MAGIC {
            return Err(TensorError::BadMagic(magic));
        }
        let mut words = [0u32; 5];
        for word in &mut words {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *word = u32::from_le_bytes(b);
        }
        if words[0] != FCW_VERSION {
            return Err(TensorError::BadVersion(words[0]));
        }
        let shape = Shape::new(
            words[1] as usize,
            words[2] as usize,
            words[3] as usize,
            words[4] as usize,
        )
        .validate()?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != shape.len() * 4 {
            return Err(TensorError::PayloadLength {
                expected: shape.len(),
                found: payload.len(),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::from_vec(shape, data)
    }

    pub fn write_fcw(&self, mut w: impl Write) -> Result<(), TensorError> {
        let mut buf = Vec::with_capacity(24 + self.data.len() * 4);
        buf.extend_from_slice(FCW_MAGIC);
        let s = self.shape;
        for word in [FCW_VERSION, s.n as u32, s.c as u32, s.h as u32, s.w as u32] {
            buf.extend_from_slice(&word.to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TensorError> {
        let bytes = std::fs::read(path)?;
        Self::read_fcw(bytes.as_slice())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TensorError> {
        let mut f = std::fs::File::create(path)?;
        self.write_fcw(&mut f)
    }
}

/// Surround every spatial plane with zeros.
pub fn pad_zero(t: &Tensor4D, p: PaddingSpec) -> Tensor4D {
    if p.is_zero() {
        return t.clone();
    }
    let s = t.shape();
    let (ph, pw) = (s.h + p.top + p.bottom, s.w + p.left + p.right);
    let out_shape = Shape::new(s.n, s.c, ph, pw);
    let mut data = vec![0.0f32; out_shape.len()];
    for (dst, src) in data
        .chunks_exact_mut(ph * pw)
        .zip(t.data().chunks_exact(s.plane_len()))
    {
        for (y, row) in src.chunks_exact(s.w).enumerate() {
            let o = (y + p.top) * pw + p.left;
            dst[o..o + s.w].copy_from_slice(row);
        }
    }
    Tensor4D { shape: out_shape, data }
}

/// Inverse of [`pad_zero`]: drop the given margins from every plane.
pub fn crop(t: &Tensor4D, p: PaddingSpec) -> Result<Tensor4D, TensorError> {
    let s = t.shape();
    if p.top + p.bottom >= s.h || p.left + p.right >= s.w {
        return Err(TensorError::ZeroDim(Shape::new(
            s.n,
            s.c,
            s.h.saturating_sub(p.top + p.bottom),
            s.w.saturating_sub(p.left + p.right),
        )));
    }
    let (h, w) = (s.h - p.top - p.bottom, s.w - p.left - p.right);
    let mut data = Vec::with_capacity(s.n * s.c * h * w);
    for plane in t.data().chunks_exact(s.plane_len()) {
        for y in p.top..p.top + h {
            let o = y * s.w + p.left;
            data.extend_from_slice(&plane[o..o + w]);
        }
    }
    Tensor4D::from_vec(Shape::new(s.n, s.c, h, w), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn singleton_at() {
        let t = Tensor4D::from_vec(Shape::new(1, 1, 1, 1), vec![7.0]).unwrap();
        assert_eq!(t.at(0, 0, 0, 0).unwrap(), 7.0);
    }

    #[test]
    fn row_major_layout() {
        let t = Tensor4D::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.at(0, 0, 1, 0).unwrap(), 3.0);
    }

    #[test]
    fn flat_index_of_last_element() {
        let data: Vec<f32> = (0..120).map(|v| v as f32).collect();
        let t = Tensor4D::from_vec(Shape::new(2, 3, 4, 5), data).unwrap();
        assert_eq!(t.offset(1, 2, 3, 4), 119);
        assert_eq!(t.at(1, 2, 3, 4).unwrap(), 119.0);
    }

    #[test]
    fn out_of_bounds_is_error() {
        let t = Tensor4D::zeros(Shape::new(1, 2, 3, 4)).unwrap();
        assert!(matches!(t.at(0, 2, 0, 0), Err(TensorError::OutOfBounds(..))));
        assert!(matches!(t.at(0, 0, 0, 4), Err(TensorError::OutOfBounds(..))));
    }

    #[test]
    fn zero_dim_and_length_rejected() {
        assert!(matches!(
            Tensor4D::zeros(Shape::new(1, 0, 2, 2)),
            Err(TensorError::ZeroDim(_))
        ));
        assert!(matches!(
            Tensor4D::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]),
            Err(TensorError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn pad_single_value() {
        let t = Tensor4D::from_vec(Shape::new(1, 1, 1, 1), vec![5.0]).unwrap();
        let p = pad_zero(&t, PaddingSpec::uniform(1));
        assert_eq!(p.shape(), Shape::new(1, 1, 3, 3));
        let mut expected = vec![0.0; 9];
        expected[4] = 5.0;
        assert_eq!(p.data(), expected.as_slice());
    }

    #[test]
    fn zero_padding_is_identity() {
        let t = Tensor4D::from_vec(Shape::new(1, 2, 2, 2), (0..8).map(|v| v as f32 - 3.5).collect())
            .unwrap();
        let p = pad_zero(&t, PaddingSpec::default());
        assert_eq!(
            p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn asymmetric_conv_padding() {
        // 13x13 plane, conv padding on top/left then right-pad toward a tile boundary.
        let t = Tensor4D::filled(Shape::new(1, 1, 13, 13), 1.0).unwrap();
        let p = pad_zero(
            &t,
            PaddingSpec {
                top: 1,
                bottom: 2,
                left: 1,
                right: 2,
            },
        );
        assert_eq!(p.shape(), Shape::new(1, 1, 16, 16));
        assert_eq!(p.at(0, 0, 1, 1).unwrap(), 1.0);
        assert_eq!(p.at(0, 0, 13, 13).unwrap(), 1.0);
        assert_eq!(p.at(0, 0, 14, 14).unwrap(), 0.0);
        assert_eq!(p.at(0, 0, 0, 5).unwrap(), 0.0);
    }

    #[test]
    fn fcw_rejects_bad_headers() {
        let t = Tensor4D::filled(Shape::new(1, 1, 2, 2), 1.5).unwrap();
        let mut bytes = Vec::new();
        t.write_fcw(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 24 + 16);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor4D::read_fcw(bad.as_slice()), Err(TensorError::BadMagic(_))));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Tensor4D::read_fcw(bad.as_slice()), Err(TensorError::BadVersion(2))));

        let short = &bytes[..bytes.len() - 4];
        assert!(matches!(
            Tensor4D::read_fcw(short),
            Err(TensorError::PayloadLength { .. })
        ));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(
            Tensor4D::read_fcw(long.as_slice()),
            Err(TensorError::PayloadLength { .. })
        ));
    }

    #[test]
    fn fcw_header_layout() {
        let t = Tensor4D::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, -2.0]).unwrap();
        let mut bytes = Vec::new();
        t.write_fcw(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"FCW1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[24..28], &1.0f32.to_le_bytes());
    }

    fn tensor_strategy() -> impl Strategy<Value = Tensor4D> {
        (1usize..3, 1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(n, c, h, w)| {
            proptest::collection::vec(-100.0f32..100.0, n * c * h * w).prop_map(move |data| {
                Tensor4D::from_vec(Shape::new(n, c, h, w), data).unwrap()
            })
        })
    }

    fn padding_strategy() -> impl Strategy<Value = PaddingSpec> {
        (0usize..3, 0usize..3, 0usize..3, 0usize..3).prop_map(|(top, bottom, left, right)| {
            PaddingSpec {
                top,
                bottom,
                left,
                right,
            }
        })
    }

    proptest! {
        #[test]
        fn write_then_read(t in tensor_strategy(), v in -10.0f32..10.0) {
            let s = t.shape();
            let mut t = t;
            for i in 0..s.n { for j in 0..s.c { for k in 0..s.h { for l in 0..s.w {
                t.set(i, j, k, l, v + l as f32).unwrap();
                prop_assert_eq!(t.at(i, j, k, l).unwrap(), v + l as f32);
            }}}}
        }

        #[test]
        fn pad_then_crop_round_trips(t in tensor_strategy(), p in padding_strategy()) {
            let padded = pad_zero(&t, p);
            let s = t.shape();
            prop_assert_eq!(padded.shape().h, s.h + p.top + p.bottom);
            prop_assert_eq!(padded.shape().w, s.w + p.left + p.right);
            let sum: f64 = t.data().iter().map(|&v| v as f64).sum();
            let psum: f64 = padded.data().iter().map(|&v| v as f64).sum();
            prop_assert_eq!(sum, psum);
            prop_assert_eq!(crop(&padded, p).unwrap(), t);
        }

        #[test]
        fn fcw_round_trip(t in tensor_strategy()) {
            let mut bytes = Vec::new();
            t.write_fcw(&mut bytes).unwrap();
            prop_assert_eq!(Tensor4D::read_fcw(bytes.as_slice()).unwrap(), t);
        }
    }
}
