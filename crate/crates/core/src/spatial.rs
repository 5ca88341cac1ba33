//! Bounding boxes and their quantized-bin embedding into the spatial stream.
//!
//! A box `(left, top, right, bottom)` in normalized page coordinates maps to
//! the sum of four learned rows, one per coordinate, each picked by
//! `bin(c) = min(floor(c * B), B - 1)`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

pub const DEFAULT_BINS: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub enum SpatialError {
    /// A coordinate is outside `[0, 1]` or not finite.
    OutOfRange { coordinate: &'static str, value: f64 },
    /// `left > right` or `top > bottom`.
    Inverted(BBox),
    EmptySequence,
    Tensor(TensorError),
}

impl fmt::Display for SpatialError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::OutOfRange { coordinate, value } => {
                write!(f, "bbox {coordinate} = {value} is outside [0, 1]")
            }
            Self::Inverted(b) => write!(
                f,
                "bbox is inverted: ({}, {}, {}, {})",
                b.left, b.top, b.right, b.bottom
            ),
            Self::EmptySequence => write!(f, "cannot encode an empty token sequence"),
            Self::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for SpatialError {}

impl From<TensorError> for SpatialError {
    fn from(e: TensorError) -> Self {
        Self::Tensor(e)
    }
}

/// Axis-aligned box in normalized page coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl BBox {
    pub const ZERO: BBox = BBox {
        left: 0.0,
        top: 0.0,
        right: 0.0,
        bottom: 0.0,
    };

    pub const PAGE: BBox = BBox {
        left: 0.0,
        top: 0.0,
        right: 1.0,
        bottom: 1.0,
    };

    pub fn new(left: f64, top: f64, right: f64, bottom: f64) -> Result<Self, SpatialError> {
        let b = BBox {
            left,
            top,
            right,
            bottom,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), SpatialError> {
        for (coordinate, value) in [
            ("left", self.left),
            ("top", self.top),
            ("right", self.right),
            ("bottom", self.bottom),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(SpatialError::OutOfRange { coordinate, value });
            }
        }
        if self.left > self.right || self.top > self.bottom {
            return Err(SpatialError::Inverted(*self));
        }
        Ok(())
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            left: self.left.min(other.left),
            top: self.top.min(other.top),
            right: self.right.max(other.right),
            bottom: self.bottom.max(other.bottom),
        }
    }

    pub fn union_all<'a>(boxes: impl IntoIterator<Item = &'a BBox>) -> Option<BBox> {
        boxes.into_iter().copied().reduce(|a, b| a.union(&b))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.left, self.top, self.right, self.bottom]
    }

    pub fn contains(&self, inner: &BBox) -> bool {
        self.left <= inner.left
            && self.top <= inner.top
            && self.right >= inner.right
            && self.bottom >= inner.bottom
    }

    /// Bin indices `(left, top, right, bottom)` for a table with `bins` rows.
    pub fn bins(&self, bins: usize) -> [u16; 4] {
        [
            bin(self.left, bins) as u16,
            bin(self.top, bins) as u16,
            bin(self.right, bins) as u16,
            bin(self.bottom, bins) as u16,
        ]
    }
}

/// Quantizes a coordinate in `[0, 1]` into one of `bins` buckets.
pub fn bin(coordinate: f64, bins: usize) -> usize {
    debug_assert!(bins > 0);
    ((coordinate * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// A text token paired with its bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialToken {
    pub token: u32,
    pub bbox: BBox,
}

/// Four `bins × dim` tables, one per box coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialEmbeddingTable<F> {
    pub left: Tensor<F>,
    pub top: Tensor<F>,
    pub right: Tensor<F>,
    pub bottom: Tensor<F>,
}

impl<F: Scalar> SpatialEmbeddingTable<F> {
    pub fn zeros(bins: usize, dim: usize) -> Self {
        Self {
            left: Tensor::zeros(&[bins, dim]),
            top: Tensor::zeros(&[bins, dim]),
            right: Tensor::zeros(&[bins, dim]),
            bottom: Tensor::zeros(&[bins, dim]),
        }
    }

    pub fn random<R: Rng>(bins: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        Self {
            left: Tensor::randn(&[bins, dim], std, rng),
            top: Tensor::randn(&[bins, dim], std, rng),
            right: Tensor::randn(&[bins, dim], std, rng),
            bottom: Tensor::randn(&[bins, dim], std, rng),
        }
    }

    pub fn bins(&self) -> usize {
        self.left.rows()
    }

    pub fn dim(&self) -> usize {
        self.left.cols()
    }

    pub fn tables(&self) -> [&Tensor<F>; 4] {
        [&self.left, &self.top, &self.right, &self.bottom]
    }

    pub fn tables_mut(&mut self) -> [&mut Tensor<F>; 4] {
        [
            &mut self.left,
            &mut self.top,
            &mut self.right,
            &mut self.bottom,
        ]
    }

    /// Embedding of one box: sum of the four looked-up rows.
    pub fn encode_bbox(&self, b: &BBox) -> Result<Vec<F>, SpatialError> {
        b.validate()?;
        Ok(self.encode_bins(b.bins(self.bins())))
    }

    pub fn encode_bins(&self, bins: [u16; 4]) -> Vec<F> {
        let mut out = vec![F::zero(); self.dim()];
        for (table, &idx) in self.tables().into_iter().zip(&bins) {
            for (o, &v) in out.iter_mut().zip(table.row(idx as usize)) {
                *o += v;
            }
        }
        out
    }

    /// The `T × d` spatial stream for a token sequence.
    pub fn encode_sequence(&self, tokens: &[SpatialToken]) -> Result<Tensor<F>, SpatialError> {
        if tokens.is_empty() {
            return Err(SpatialError::EmptySequence);
        }
        let mut data = Vec::with_capacity(tokens.len() * self.dim());
        for t in tokens {
            data.extend(self.encode_bbox(&t.bbox)?);
        }
        Ok(Tensor::new(vec![tokens.len(), self.dim()], data)?)
    }
}

/// Graph handles for the four coordinate tables.
#[derive(Debug, Clone, Copy)]
pub struct SpatialVars {
    pub tables: [Var; 4],
}

impl SpatialVars {
    pub fn register<F: Scalar>(
        g: &mut Graph<F>,
        table: &SpatialEmbeddingTable<F>,
        trainable: bool,
    ) -> Self {
        let t = table.tables();
        Self {
            tables: [0, 1, 2, 3].map(|i| g.leaf(t[i].clone(), trainable)),
        }
    }

    /// Differentiable spatial stream from per-token bin indices.
    pub fn encode<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bins: &[[u16; 4]],
    ) -> Result<Var, SpatialError> {
        if bins.is_empty() {
            return Err(SpatialError::EmptySequence);
        }
        let mut acc: Option<Var> = None;
        for (k, &table) in self.tables.iter().enumerate() {
            let ids: Vec<usize> = bins.iter().map(|b| b[k] as usize).collect();
            let rows = g.embedding(table, &ids)?;
            acc = Some(match acc {
                None => rows,
                Some(a) => g.add(a, rows)?,
            });
        }
        Ok(acc.expect("four tables"))
    }
}
