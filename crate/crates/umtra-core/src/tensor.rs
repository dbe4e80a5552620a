//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is an immutable shaped value. When it was produced by an
//! operation recorded on a [`Graph`](crate::graph::Graph) it also carries
//! a reference to its tape node, which is what makes it differentiable;
//! a tensor without a node never receives a gradient. Payloads are
//! shared via `Arc`, so cloning is cheap and detached tensors are safe
//! to move across threads.

use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

/// Identifies a node on a specific graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub graph: u64,
    pub idx: usize,
}

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
    pub(crate) node: Option<NodeRef>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: data.into(),
            node: None,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<[f64]>, node: Option<NodeRef>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, node }
    }

    /// Rank-0 scalar.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: alloc::vec![v].into(),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: alloc::vec![0.0; numel].into(),
            node: None,
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: alloc::vec![v; numel].into(),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<[f64]> {
        Arc::clone(&self.data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Whether this tensor participates in a recorded computation.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// The same value with no tape attachment.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when both tensors view the same underlying buffer.
    pub fn shares_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    /// Bit-exact equality of shape and payload.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Serializes as magic `UMT0`, little-endian u32 rank, u32 extents,
    /// then the row-major f64 payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 8 * self.data.len());
        out.extend_from_slice(b"UMT0");
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &e in &self.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in self.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses one serialized tensor, returning it and the bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Tensor, usize)> {
        let take = |off: usize, n: usize| -> Result<&[u8]> {
            bytes
                .get(off..off + n)
                .ok_or_else(|| CoreError::Decode("truncated tensor bytes".to_string()))
        };
        if take(0, 4)? != b"UMT0" {
            return Err(CoreError::Decode("bad tensor magic".to_string()));
        }
        let rank = u32::from_le_bytes(take(4, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut off = 8;
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(off, 4)?.try_into().unwrap()) as usize);
            off += 4;
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(take(off, 8)?.try_into().unwrap()));
            off += 8;
        }
        Ok((Tensor::new(shape, data)?, off))
    }
}
