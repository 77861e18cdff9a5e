//! Dense 4-D tensors whose logical shape is decoupled from physical storage.
//!
//! A [`PhysicalBuffer`] is a flat array of `f32` with a unique id. A
//! [`LogicalTensor`] is a view over a buffer: shape, [`Layout`] and element
//! offset. Several logical tensors may share one buffer; cloning a
//! `LogicalTensor` aliases the same storage.

use std::fmt;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lane width of the packed layout (one RGBA texel).
pub const PACK_LANES: usize = 4;

const RAW_MAGIC: &[u8; 4] = b"HSEG";
const RAW_VERSION: u32 = 1;
/// Size of the raw dump header in bytes.
pub const RAW_HEADER_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("invalid shape {0}: every dimension must be at least 1")]
    InvalidShape(Shape),
    #[error("element count of {0} overflows the index range")]
    Allocation(Shape),
    #[error("index ({n},{h},{w},{c}) out of bounds for shape {shape}")]
    OutOfBounds {
        shape: Shape,
        n: usize,
        h: usize,
        w: usize,
        c: usize,
    },
    #[error("view needs {needed} elements but buffer holds {capacity}")]
    BufferTooSmall { needed: usize, capacity: usize },
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("malformed raw tensor: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Logical tensor extent in NHWC order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Result<Self, TensorError> {
        let s = Shape { n, h, w, c };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.n == 0 || self.h == 0 || self.w == 0 || self.c == 0 {
            return Err(TensorError::InvalidShape(*self));
        }
        self.checked_len().ok_or(TensorError::Allocation(*self))?;
        Ok(())
    }

    pub fn checked_len(&self) -> Option<usize> {
        self.n
            .checked_mul(self.h)?
            .checked_mul(self.w)?
            .checked_mul(self.c)
    }

    /// Number of logical elements. Only meaningful for validated shapes.
    pub fn len(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub fn with_spatial(self, h: usize, w: usize) -> Self {
        Shape { h, w, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.h, self.w, self.c)
    }
}

/// Physical ordering of a tensor's elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Channel-last (NHWC).
    Interleaved,
    /// Channel-first (NCHW).
    Planar,
    /// Channels grouped into slices of four (N, C/4, H, W, 4), zero-padded.
    Packed4,
}

impl Layout {
    pub const ALL: [Layout; 3] = [Layout::Interleaved, Layout::Planar, Layout::Packed4];

    /// Elements of storage needed to hold `shape` in this layout.
    pub fn extent(self, shape: Shape) -> Option<usize> {
        match self {
            Layout::Interleaved | Layout::Planar => shape.checked_len(),
            Layout::Packed4 => shape
                .n
                .checked_mul(packed_slices(shape.c))?
                .checked_mul(shape.h)?
                .checked_mul(shape.w)?
                .checked_mul(PACK_LANES),
        }
    }

    /// Storage index of logical element (n,h,w,c), relative to the view offset.
    #[inline]
    pub fn index(self, shape: Shape, n: usize, h: usize, w: usize, c: usize) -> usize {
        match self {
            Layout::Interleaved => ((n * shape.h + h) * shape.w + w) * shape.c + c,
            Layout::Planar => ((n * shape.c + c) * shape.h + h) * shape.w + w,
            Layout::Packed4 => {
                let slices = packed_slices(shape.c);
                ((((n * slices + c / PACK_LANES) * shape.h + h) * shape.w + w) * PACK_LANES)
                    + c % PACK_LANES
            }
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Layout::Interleaved => "interleaved",
            Layout::Planar => "planar",
            Layout::Packed4 => "packed4",
        };
        f.write_str(s)
    }
}

pub fn packed_slices(c: usize) -> usize {
    c.div_ceil(PACK_LANES)
}

static NEXT_BUFFER_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub u64);

/// Flat `f32` storage with a process-unique id.
#[derive(Debug)]
pub struct PhysicalBuffer {
    id: BufferId,
    storage: RwLock<Vec<f32>>,
}

impl PhysicalBuffer {
    pub fn zeroed(len: usize) -> Arc<Self> {
        Self::from_vec(vec![0.0; len])
    }

    pub fn from_vec(data: Vec<f32>) -> Arc<Self> {
        Arc::new(PhysicalBuffer {
            id: BufferId(NEXT_BUFFER_ID.fetch_add(1, Ordering::Relaxed)),
            storage: RwLock::new(data),
        })
    }

    pub fn id(&self) -> BufferId {
        self.id
    }

    /// Capacity in elements.
    pub fn capacity(&self) -> usize {
        self.data().len()
    }

    pub fn byte_len(&self) -> usize {
        self.capacity() * std::mem::size_of::<f32>()
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f32>> {
        self.storage.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn data_mut(&self) -> RwLockWriteGuard<'_, Vec<f32>> {
        self.storage.write().unwrap_or_else(|e| e.into_inner())
    }
}

/// How to initialise a freshly allocated tensor.
#[derive(Clone, Debug)]
pub enum Fill {
    Zeros,
    Constant(f32),
    /// Uniform in [-1, 1), generated in interleaved logical order.
    Random {
        seed: u64,
    },
    /// Explicit values in interleaved logical order.
    Values(Vec<f32>),
}

/// A shape + layout view into a [`PhysicalBuffer`].
#[derive(Clone, Debug)]
pub struct LogicalTensor {
    shape: Shape,
    layout: Layout,
    buffer: Arc<PhysicalBuffer>,
    offset: usize,
}

/// Allocate a new tensor with its own buffer.
pub fn make_tensor(shape: Shape, layout: Layout, fill: Fill) -> Result<LogicalTensor, TensorError> {
    shape.validate()?;
    let values = match fill {
        Fill::Zeros => vec![0.0; shape.len()],
        Fill::Constant(v) => vec![v; shape.len()],
        Fill::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..shape.len())
                .map(|_| rng.gen_range(-1.0f32..1.0))
                .collect()
        }
        Fill::Values(v) => v,
    };
    LogicalTensor::from_interleaved(shape, layout, &values)
}

/// Copy `t` into a fresh buffer with layout `target`. Values are preserved bit for bit.
pub fn repack(t: &LogicalTensor, target: Layout) -> Result<LogicalTensor, TensorError> {
    LogicalTensor::from_interleaved(t.shape, target, &t.to_interleaved())
}

impl LogicalTensor {
    /// Alias an existing buffer. Fails if the view does not fit.
    pub fn view(
        buffer: Arc<PhysicalBuffer>,
        shape: Shape,
        layout: Layout,
        offset: usize,
    ) -> Result<Self, TensorError> {
        shape.validate()?;
        let extent = layout.extent(shape).ok_or(TensorError::Allocation(shape))?;
        let needed = offset
            .checked_add(extent)
            .ok_or(TensorError::Allocation(shape))?;
        let capacity = buffer.capacity();
        if needed > capacity {
            return Err(TensorError::BufferTooSmall { needed, capacity });
        }
        Ok(LogicalTensor {
            shape,
            layout,
            buffer,
            offset,
        })
    }

    pub fn from_interleaved(
        shape: Shape,
        layout: Layout,
        values: &[f32],
    ) -> Result<Self, TensorError> {
        shape.validate()?;
        let extent = layout.extent(shape).ok_or(TensorError::Allocation(shape))?;
        let buffer = PhysicalBuffer::zeroed(extent);
        let t = LogicalTensor::view(buffer, shape, layout, 0)?;
        t.store_interleaved(values)?;
        Ok(t)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn buffer(&self) -> &Arc<PhysicalBuffer> {
        &self.buffer
    }

    /// Storage elements this view covers, including packed padding.
    pub fn extent(&self) -> usize {
        // validated at construction
        self.layout.extent(self.shape).unwrap_or(usize::MAX)
    }

    fn check(&self, n: usize, h: usize, w: usize, c: usize) -> Result<usize, TensorError> {
        let s = self.shape;
        if n >= s.n || h >= s.h || w >= s.w || c >= s.c {
            return Err(TensorError::OutOfBounds {
                shape: s,
                n,
                h,
                w,
                c,
            });
        }
        Ok(self.offset + self.layout.index(s, n, h, w, c))
    }

    pub fn read(&self, n: usize, h: usize, w: usize, c: usize) -> Result<f32, TensorError> {
        let idx = self.check(n, h, w, c)?;
        Ok(self.buffer.data()[idx])
    }

    pub fn write(&self, n: usize, h: usize, w: usize, c: usize, v: f32) -> Result<(), TensorError> {
        let idx = self.check(n, h, w, c)?;
        self.buffer.data_mut()[idx] = v;
        Ok(())
    }

    /// Logical contents in interleaved (NHWC) order.
    pub fn to_interleaved(&self) -> Vec<f32> {
        let data = self.buffer.data();
        let storage = &data[self.offset..self.offset + self.extent()];
        let s = self.shape;
        match self.layout {
            Layout::Interleaved => storage.to_vec(),
            layout => {
                let mut out = Vec::with_capacity(s.len());
                for n in 0..s.n {
                    for h in 0..s.h {
                        for w in 0..s.w {
                            for c in 0..s.c {
                                out.push(storage[layout.index(s, n, h, w, c)]);
                            }
                        }
                    }
                }
                out
            }
        }
    }

    /// Overwrite the whole view from interleaved values. Packed padding lanes are zeroed.
    pub fn store_interleaved(&self, values: &[f32]) -> Result<(), TensorError> {
        let s = self.shape;
        if values.len() != s.len() {
            return Err(TensorError::LengthMismatch {
                expected: s.len(),
                got: values.len(),
            });
        }
        let extent = self.extent();
        let mut data = self.buffer.data_mut();
        let storage = &mut data[self.offset..self.offset + extent];
        match self.layout {
            Layout::Interleaved => storage.copy_from_slice(values),
            layout => {
                if layout == Layout::Packed4 && !s.c.is_multiple_of(PACK_LANES) {
                    storage.fill(0.0);
                }
                let mut src = values.iter();
                for n in 0..s.n {
                    for h in 0..s.h {
                        for w in 0..s.w {
                            for c in 0..s.c {
                                storage[layout.index(s, n, h, w, c)] = *src.next().unwrap();
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Write the raw dump: 24-byte header then little-endian `f32` in interleaved order.
    pub fn write_raw<W: Write>(&self, mut out: W) -> Result<(), TensorError> {
        let s = self.shape;
        let mut header = Vec::with_capacity(RAW_HEADER_LEN);
        header.extend_from_slice(RAW_MAGIC);
        header.extend_from_slice(&RAW_VERSION.to_le_bytes());
        for d in [s.n, s.h, s.w, s.c] {
            let d = u32::try_from(d)
                .map_err(|_| TensorError::Format("dimension exceeds u32".into()))?;
            header.extend_from_slice(&d.to_le_bytes());
        }
        out.write_all(&header)?;
        let mut payload = Vec::with_capacity(s.len() * 4);
        for v in self.to_interleaved() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&payload)?;
        Ok(())
    }

    pub fn read_raw<R: Read>(mut input: R, layout: Layout) -> Result<Self, TensorError> {
        let mut header = [0u8; RAW_HEADER_LEN];
        input.read_exact(&mut header)?;
        if &header[0..4] != RAW_MAGIC {
            return Err(TensorError::Format("bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != RAW_VERSION {
            return Err(TensorError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let shape = Shape::new(
            word(8) as usize,
            word(12) as usize,
            word(16) as usize,
            word(20) as usize,
        )?;
        let mut payload = vec![0u8; shape.len() * 4];
        input.read_exact(&mut payload)?;
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::from_interleaved(shape, layout, &values)
    }
}
