//! Batch flattening and slot layout.
//!
//! A batch of `n` samples with `d` features each is viewed as an `n x d`
//! matrix and read column by column, so slot `j * n + k` holds feature `j`
//! of sample `k`. The complex-paired layout additionally folds features
//! `2u` and `2u + 1` into the real and imaginary part of one slot.

use serde::{Deserialize, Serialize};

use crate::backend::C64;
use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;

/// `n` samples of `h` channels of `r x c` values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchShape {
    pub n: usize,
    pub h: usize,
    pub r: usize,
    pub c: usize,
}

impl BatchShape {
    pub fn new(n: usize, h: usize, r: usize, c: usize) -> Result<Self> {
        if n == 0 || h == 0 || r == 0 || c == 0 {
            return Err(shape_err(format!(
                "batch dims must be positive, got {n}x{h}x{r}x{c}"
            )));
        }
        h.checked_mul(r)
            .and_then(|x| x.checked_mul(c))
            .and_then(|d| d.checked_mul(n))
            .ok_or_else(|| shape_err("batch dims overflow"))?;
        Ok(Self { n, h, r, c })
    }

    /// Flat shape for `n` samples of `d` features.
    pub fn flat(n: usize, d: usize) -> Result<Self> {
        Self::new(n, 1, 1, d)
    }

    pub fn features(&self) -> usize {
        self.h * self.r * self.c
    }

    /// Packed length `m = d * n`.
    pub fn packed_len(&self) -> usize {
        self.features() * self.n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    ColumnMajor,
    ColumnMajorComplexPaired,
}

/// A packed batch. `data` is a plaintext slot vector or a ciphertext.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatch<T> {
    pub data: T,
    pub shape: BatchShape,
    pub layout: Layout,
    pub valid_len: usize,
}

impl<T> PackedBatch<T> {
    /// Number of packed columns: `d`, or `ceil(d / 2)` when complex-paired.
    pub fn packed_width(&self) -> usize {
        match self.layout {
            Layout::ColumnMajor => self.shape.features(),
            Layout::ColumnMajorComplexPaired => self.shape.features().div_ceil(2),
        }
    }

    pub fn map<U>(self, f: impl FnOnce(T) -> U) -> PackedBatch<U> {
        PackedBatch {
            data: f(self.data),
            shape: self.shape,
            layout: self.layout,
            valid_len: self.valid_len,
        }
    }

    pub fn try_map<U, E>(
        self,
        f: impl FnOnce(T) -> std::result::Result<U, E>,
    ) -> std::result::Result<PackedBatch<U>, E> {
        Ok(PackedBatch {
            data: f(self.data)?,
            shape: self.shape,
            layout: self.layout,
            valid_len: self.valid_len,
        })
    }

    pub fn as_ref(&self) -> PackedBatch<&T> {
        PackedBatch {
            data: &self.data,
            shape: self.shape,
            layout: self.layout,
            valid_len: self.valid_len,
        }
    }
}

/// Concatenation over channels of each channel's row-major flattening.
pub fn row_flatten(channels: &[Matrix]) -> Vec<f64> {
    channels
        .iter()
        .flat_map(|ch| ch.as_slice().iter().copied())
        .collect()
}

/// Rows of an `n x d` matrix where row `k` is `row_flatten(sample_k)`.
pub fn flatten_samples(samples: &[Vec<Matrix>]) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| row_flatten(s)).collect();
    Matrix::from_rows(&rows)
}

fn check_capacity(needed: usize, capacity: usize) -> Result<()> {
    if needed > capacity {
        Err(Error::CapacityExceeded { needed, capacity })
    } else {
        Ok(())
    }
}

/// Column-major packing of an `n x d` matrix.
pub fn pack_matrix(a: &Matrix, slot_count: usize) -> Result<PackedBatch<Vec<C64>>> {
    let (n, d) = (a.rows(), a.cols());
    let shape = BatchShape::flat(n, d)?;
    let m = shape.packed_len();
    check_capacity(m, slot_count)?;
    let mut slots = vec![C64::new(0.0, 0.0); slot_count];
    for k in 0..n {
        for j in 0..d {
            slots[j * n + k] = C64::new(a[(k, j)], 0.0);
        }
    }
    Ok(PackedBatch {
        data: slots,
        shape,
        layout: Layout::ColumnMajor,
        valid_len: m,
    })
}

/// Packs `n` samples of `h x r x c` (each a list of `h` channel matrices).
pub fn pack_batch(samples: &[Vec<Matrix>], slot_count: usize) -> Result<PackedBatch<Vec<C64>>> {
    let first = samples.first().ok_or_else(|| shape_err("empty batch"))?;
    let first_ch = first
        .first()
        .ok_or_else(|| shape_err("sample without channels"))?;
    let shape = BatchShape::new(samples.len(), first.len(), first_ch.rows(), first_ch.cols())?;
    for (k, s) in samples.iter().enumerate() {
        if s.len() != shape.h
            || s.iter()
                .any(|ch| ch.rows() != shape.r || ch.cols() != shape.c)
        {
            return Err(shape_err(format!(
                "sample {k} does not match {}x{}x{}",
                shape.h, shape.r, shape.c
            )));
        }
    }
    let mut pb = pack_matrix(&flatten_samples(samples)?, slot_count)?;
    pb.shape = shape;
    Ok(pb)
}

/// Inverse of [`pack_matrix`]: the `n x d` matrix of features.
pub fn unpack_batch(pb: &PackedBatch<Vec<C64>>) -> Result<Matrix> {
    if pb.layout != Layout::ColumnMajor {
        return Err(shape_err(
            "complex-paired batches must be decompressed first",
        ));
    }
    let (n, d) = (pb.shape.n, pb.shape.features());
    if pb.data.len() < n * d {
        return Err(shape_err("slot vector shorter than the packed shape"));
    }
    Ok(Matrix::from_fn(n, d, |k, j| pb.data[j * n + k].re))
}

/// Pairs columns `(2u, 2u + 1)` of a real `n x d` matrix into `A[k][2u] + i A[k][2u+1]`;
/// odd `d` gets a zero partner column.
pub fn complex_compress_input(a: &Matrix, slot_count: usize) -> Result<PackedBatch<Vec<C64>>> {
    let (n, d) = (a.rows(), a.cols());
    let shape = BatchShape::flat(n, d)?;
    let width = d.div_ceil(2);
    let m = width * n;
    check_capacity(m, slot_count)?;
    let mut slots = vec![C64::new(0.0, 0.0); slot_count];
    for k in 0..n {
        for u in 0..width {
            slots[u * n + k] = C64::new(a[(k, 2 * u)], a.get_or_zero(k, 2 * u + 1));
        }
    }
    Ok(PackedBatch {
        data: slots,
        shape,
        layout: Layout::ColumnMajorComplexPaired,
        valid_len: m,
    })
}

/// Undoes [`complex_compress_input`].
pub fn complex_decompress(pb: &PackedBatch<Vec<C64>>) -> Result<Matrix> {
    if pb.layout != Layout::ColumnMajorComplexPaired {
        return Err(shape_err("batch is not complex-paired"));
    }
    let n = pb.shape.n;
    Ok(Matrix::from_fn(n, pb.shape.features(), |k, j| {
        let z = pb.data[(j / 2) * n + k];
        if j % 2 == 0 {
            z.re
        } else {
            z.im
        }
    }))
}
