//! Dense 4-D tensors in `(batch, height, width, channels)` layout.
//!
//! All numeric state in this crate lives in [`Tensor`] values: images, hidden
//! states, convolution kernels, per-channel parameter vectors and scalars
//! (shape `1x1x1x1`). Data is stored row-major, batch-major, as 64-bit floats
//! behind an `Arc`, so tensors are immutable values that are cheap to clone
//! and safe to share across threads.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

/// Errors produced by tensor construction, arithmetic and serialization.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch { op: String, lhs: Shape, rhs: Shape },
    #[error("invalid shape {shape}: {reason}")]
    InvalidShape { shape: Shape, reason: String },
    #[error("data length {got} does not match shape {shape} ({expected} elements)")]
    DataLength { shape: Shape, expected: usize, got: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad tensor file {path}: {reason}")]
    BadFile { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// `(batch, height, width, channels)` dimensions, all >= 1.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn batch(&self) -> usize {
        self.0[0]
    }
    pub fn height(&self) -> usize {
        self.0[1]
    }
    pub fn width(&self) -> usize {
        self.0[2]
    }
    pub fn channels(&self) -> usize {
        self.0[3]
    }
    pub fn len(&self) -> usize {
        self.0.iter().product()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Number of positions the per-channel statistics pool over.
    pub fn spatial_batch(&self) -> usize {
        self.batch() * self.height() * self.width()
    }
    pub fn is_scalar(&self) -> bool {
        self.0 == [1, 1, 1, 1]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

/// Immutable dense array of `f64` in `(batch, height, width, channels)` order.
#[derive(Clone)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}, {} values)", self.shape, self.data.len())
    }
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let shape = Shape(shape);
        if shape.0.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                shape,
                reason: "all dimensions must be >= 1".into(),
            });
        }
        if data.len() != shape.len() {
            return Err(TensorError::DataLength {
                shape,
                expected: shape.len(),
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor::new(shape, vec![0.0; shape.iter().product()]).expect("valid shape")
    }

    pub fn ones(shape: [usize; 4]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Tensor::new(shape, vec![value; shape.iter().product()]).expect("valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new([1, 1, 1, 1], vec![value]).expect("scalar shape")
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn<R: Rng>(shape: [usize; 4], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor::new(shape, data).expect("valid shape")
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dims(&self) -> [usize; 4] {
        self.shape.0
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Bytes of payload; the unit the tape's memory meter counts in.
    pub fn byte_len(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }

    #[inline]
    pub fn index(&self, b: usize, y: usize, x: usize, c: usize) -> usize {
        let [_, h, w, ch] = self.shape.0;
        ((b * h + y) * w + x) * ch + c
    }

    #[inline]
    pub fn at(&self, b: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(b, y, x, c)]
    }

    pub fn item(&self) -> Result<f64> {
        if !self.shape.is_scalar() {
            return Err(TensorError::InvalidShape {
                shape: self.shape,
                reason: "expected a 1x1x1x1 scalar tensor".into(),
            });
        }
        Ok(self.data[0])
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: op.into(),
                lhs: self.shape,
                rhs: other.shape,
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        Ok(self.zip(other, |a, b| a * b))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor {
            shape: self.shape,
            data: Arc::new(data),
        }
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Euclidean distance, with a shape check.
    pub fn distance(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "distance")?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// Replace one element, copying the payload. Test and finite-difference
    /// helper; not part of any hot path.
    pub fn with_value_at(&self, flat_index: usize, value: f64) -> Tensor {
        let mut data = self.data.as_ref().clone();
        data[flat_index] = value;
        Tensor {
            shape: self.shape,
            data: Arc::new(data),
        }
    }
}

/// Convolution weights, shape `(kh, kw, in_channels, out_channels)` with odd
/// spatial extent so that "same" padding is symmetric.
#[derive(Clone, Debug)]
pub struct Kernel(Tensor);

impl Kernel {
    pub fn new(t: Tensor) -> Result<Self> {
        let [kh, kw, _, _] = t.dims();
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::InvalidShape {
                shape: t.shape(),
                reason: "kernel spatial extent must be odd".into(),
            });
        }
        Ok(Kernel(t))
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        Kernel::new(Tensor::new(shape, data)?)
    }

    pub fn randn<R: Rng>(shape: [usize; 4], std: f64, rng: &mut R) -> Result<Self> {
        Kernel::new(Tensor::randn(shape, std, rng))
    }

    /// Kernel that is 1 at the spatial center for matching in/out channel and
    /// 0 elsewhere; convolution with it is the identity.
    pub fn dirac(extent: usize, channels: usize) -> Result<Self> {
        let mut data = vec![0.0; extent * extent * channels * channels];
        let mid = extent / 2;
        for c in 0..channels {
            data[((mid * extent + mid) * channels + c) * channels + c] = 1.0;
        }
        Kernel::from_vec([extent, extent, channels, channels], data)
    }

    pub fn kh(&self) -> usize {
        self.0.dims()[0]
    }
    pub fn kw(&self) -> usize {
        self.0.dims()[1]
    }
    pub fn in_channels(&self) -> usize {
        self.0.dims()[2]
    }
    pub fn out_channels(&self) -> usize {
        self.0.dims()[3]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

const TENSOR_HEADER_LEN: usize = 16;

/// Write a tensor in the flat binary format: a 16-byte header of four
/// little-endian `u32` dimensions followed by the `f64` little-endian payload.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(TENSOR_HEADER_LEN + t.byte_len());
    for d in t.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &buf)
}

/// Read a tensor written by [`write_tensor`].
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let io_err = |source| TensorError::Io {
        context: format!("reading tensor {}", path.display()),
        source,
    };
    let bytes = std::fs::read(path).map_err(io_err)?;
    if bytes.len() < TENSOR_HEADER_LEN {
        return Err(TensorError::BadFile {
            path: path.display().to_string(),
            reason: "file shorter than the 16-byte header".into(),
        });
    }
    let mut dims = [0usize; 4];
    for (i, dim) in dims.iter_mut().enumerate() {
        let mut raw = [0u8; 4];
        raw.copy_from_slice(&bytes[i * 4..i * 4 + 4]);
        *dim = u32::from_le_bytes(raw) as usize;
    }
    let expected = TENSOR_HEADER_LEN + dims.iter().product::<usize>() * 8;
    if bytes.len() != expected {
        return Err(TensorError::BadFile {
            path: path.display().to_string(),
            reason: format!("expected {} bytes for dims {:?}, found {}", expected, dims, bytes.len()),
        });
    }
    let data = bytes[TENSOR_HEADER_LEN..]
        .chunks_exact(8)
        .map(|chunk| {
            let mut raw = [0u8; 8];
            raw.copy_from_slice(chunk);
            f64::from_le_bytes(raw)
        })
        .collect();
    Tensor::new(dims, data)
}

/// Write via a temp file in the same directory, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |context: String| {
        move |source| TensorError::Io { context, source }
    };
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io_err(format!("writing {}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(io_err(format!("renaming into {}", path.display())))?;
    Ok(())
}
