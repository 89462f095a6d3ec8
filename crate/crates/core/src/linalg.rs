//! Generalized-diagonal matrix multiplication over packed batches.
//!
//! For an `n x d` input packed column-major and a `d x h` weight matrix `W`,
//! diagonal `i` holds `W[(i + j) mod d][j]` at slots `j * n .. (j + 1) * n`.
//! The product is `sum_i diag_i ⊙ rot(x, n * i)`, where `x` is the packed
//! input repeated with period `d * n` far enough that every read lands on
//! a copy. The repetition is built with `ceil(log2(copies))` doubling
//! rotations, or skipped when one period already fills all slots.
//!
//! The compressed variant multiplies complex-paired inputs by diagonals of
//! `(W[2u] - i W[2u+1]) / 2`; the real part of the summed product is
//! recovered with one conjugation and one addition.

use crate::backend::{SimdBackend, C64};
use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;
use crate::packing::{BatchShape, Layout, PackedBatch};

/// A slot vector held either in the clear or as a backend ciphertext.
#[derive(Debug, Clone)]
pub enum WeightSlots<C> {
    Plain(Vec<C64>),
    Encrypted(C),
}

impl<C> WeightSlots<C> {
    pub fn is_encrypted(&self) -> bool {
        matches!(self, WeightSlots::Encrypted(_))
    }

    pub fn encrypt_with<D>(self, f: &impl Fn(&[C64]) -> Result<D>) -> Result<WeightSlots<D>> {
        match self {
            WeightSlots::Plain(v) => Ok(WeightSlots::Encrypted(f(&v)?)),
            WeightSlots::Encrypted(_) => Err(Error::Config("weights are already encrypted".into())),
        }
    }
}

/// A `d x h` weight matrix in generalized-diagonal form, replicated for batch size `n`.
#[derive(Debug, Clone)]
pub struct DiagonalSet<C> {
    pub d: usize,
    pub h: usize,
    pub n: usize,
    pub compressed: bool,
    pub diags: Vec<WeightSlots<C>>,
}

impl<C> DiagonalSet<C> {
    pub fn num_diags(&self) -> usize {
        self.diags.len()
    }

    pub fn is_encrypted(&self) -> bool {
        self.diags.first().is_some_and(WeightSlots::is_encrypted)
    }

    pub fn encrypt_with<D>(self, f: &impl Fn(&[C64]) -> Result<D>) -> Result<DiagonalSet<D>> {
        let diags = self
            .diags
            .into_iter()
            .map(|w| w.encrypt_with(f))
            .collect::<Result<_>>()?;
        Ok(DiagonalSet {
            d: self.d,
            h: self.h,
            n: self.n,
            compressed: self.compressed,
            diags,
        })
    }
}

/// Diagonal count used for inner dimension `d`.
pub fn diag_count(d: usize, compressed: bool) -> usize {
    if compressed {
        d.div_ceil(2)
    } else {
        d
    }
}

fn diagonals_of(
    entries: impl Fn(usize, usize) -> C64,
    width: usize,
    h: usize,
    n: usize,
) -> Vec<Vec<C64>> {
    (0..width)
        .map(|i| {
            let mut v = Vec::with_capacity(h * n);
            for j in 0..h {
                let e = entries((i + j) % width, j);
                v.extend(std::iter::repeat_n(e, n));
            }
            v
        })
        .collect()
}

/// Generalized diagonals of `W` (`d x h`), each entry repeated `n` times.
pub fn generalized_diagonals<C>(w: &Matrix, n: usize) -> Result<DiagonalSet<C>> {
    let (d, h) = (w.rows(), w.cols());
    if d == 0 || h == 0 || n == 0 {
        return Err(shape_err("weight matrix and batch must be non-empty"));
    }
    let diags = diagonals_of(|r, j| C64::new(w[(r, j)], 0.0), d, h, n);
    Ok(DiagonalSet {
        d,
        h,
        n,
        compressed: false,
        diags: diags.into_iter().map(WeightSlots::Plain).collect(),
    })
}

/// Diagonals of the row-paired matrix `(W[2u][j] - i W[2u+1][j]) / 2`; odd
/// `d` pairs the last row with zeros.
pub fn compressed_diagonals<C>(w: &Matrix, n: usize) -> Result<DiagonalSet<C>> {
    let (d, h) = (w.rows(), w.cols());
    if d == 0 || h == 0 || n == 0 {
        return Err(shape_err("weight matrix and batch must be non-empty"));
    }
    let width = d.div_ceil(2);
    let diags = diagonals_of(
        |u, j| C64::new(0.5 * w[(2 * u, j)], -0.5 * w.get_or_zero(2 * u + 1, j)),
        width,
        h,
        n,
    );
    Ok(DiagonalSet {
        d,
        h,
        n,
        compressed: true,
        diags: diags.into_iter().map(WeightSlots::Plain).collect(),
    })
}

/// Doubling rotations needed to repeat a `width * n` packed input so that a
/// product with `h` output columns never reads past a copy.
pub fn replication_steps(width: usize, h: usize, n: usize, slot_count: usize) -> Result<u32> {
    let period = width * n;
    if period > slot_count {
        return Err(Error::CapacityExceeded {
            needed: period,
            capacity: slot_count,
        });
    }
    if h * n > slot_count {
        return Err(Error::CapacityExceeded {
            needed: h * n,
            capacity: slot_count,
        });
    }
    let copies = 1 + (h - 1).div_ceil(width);
    if copies == 1 || period == slot_count {
        return Ok(0);
    }
    let steps = copies.next_power_of_two().trailing_zeros();
    let footprint = period << steps;
    if footprint > slot_count {
        return Err(Error::CapacityExceeded {
            needed: footprint,
            capacity: slot_count,
        });
    }
    Ok(steps)
}

/// Sums in a fixed pairwise tree over index order.
pub(crate) fn tree_sum<B: SimdBackend>(be: &B, mut items: Vec<B::Ct>) -> Result<B::Ct> {
    if items.is_empty() {
        return Err(shape_err("empty sum"));
    }
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(be.add(&a, &b)?),
                None => next.push(a),
            }
        }
        items = next;
    }
    Ok(items.pop().expect("non-empty"))
}

/// Rotated copies `rot(x, n * i)` for `i < width`, after replication.
pub(crate) fn rotated_inputs<B: SimdBackend>(
    be: &B,
    input: &PackedBatch<B::Ct>,
    h: usize,
) -> Result<Vec<B::Ct>> {
    let width = input.packed_width();
    let n = input.shape.n;
    let steps = replication_steps(width, h, n, be.params().slot_count)?;
    let period = (width * n) as i64;
    let mut rep = input.data.clone();
    for s in 0..steps {
        let shifted = be.rotate(&rep, -(period << s));
        rep = be.add(&rep, &shifted)?;
    }
    let mut out = Vec::with_capacity(width);
    out.push(rep.clone());
    for i in 1..width {
        out.push(be.rotate(&rep, (n * i) as i64));
    }
    Ok(out)
}

pub(crate) fn check_operands<C, D>(input: &PackedBatch<C>, diags: &DiagonalSet<D>) -> Result<()> {
    let expected = if diags.compressed {
        Layout::ColumnMajorComplexPaired
    } else {
        Layout::ColumnMajor
    };
    if input.layout != expected {
        return Err(shape_err(format!(
            "input layout {:?} does not match diagonals",
            input.layout
        )));
    }
    if input.shape.features() != diags.d {
        return Err(shape_err(format!(
            "input has {} features, weights expect {}",
            input.shape.features(),
            diags.d
        )));
    }
    if input.shape.n != diags.n {
        return Err(shape_err(format!(
            "input batch {} vs diagonal replication {}",
            input.shape.n, diags.n
        )));
    }
    Ok(())
}

/// `diags[i] ⊙ rotated[i]` for every diagonal.
pub(crate) fn diagonal_products<B: SimdBackend>(
    be: &B,
    rotated: &[B::Ct],
    diags: &DiagonalSet<B::Ct>,
) -> Result<Vec<B::Ct>> {
    rotated
        .iter()
        .zip(&diags.diags)
        .map(|(x, w)| match w {
            WeightSlots::Plain(p) => be.mul_plain(x, p),
            WeightSlots::Encrypted(c) => be.mul(x, c),
        })
        .collect()
}

/// `z + conj(z)`; with the halved compressed weights this is the real part.
pub(crate) fn extract_real<B: SimdBackend>(be: &B, z: &B::Ct) -> Result<B::Ct> {
    be.add(z, &be.conjugate(z))
}

pub(crate) fn output_batch<C>(data: C, n: usize, h: usize) -> Result<PackedBatch<C>> {
    Ok(PackedBatch {
        data,
        shape: BatchShape::flat(n, h)?,
        layout: Layout::ColumnMajor,
        valid_len: n * h,
    })
}

fn matmul_impl<B: SimdBackend>(
    be: &B,
    a: &PackedBatch<B::Ct>,
    diags: &DiagonalSet<B::Ct>,
) -> Result<PackedBatch<B::Ct>> {
    check_operands(a, diags)?;
    let rotated = rotated_inputs(be, a, diags.h)?;
    let sum = tree_sum(be, diagonal_products(be, &rotated, diags)?)?;
    let out = if diags.compressed {
        extract_real(be, &sum)?
    } else {
        sum
    };
    output_batch(out, a.shape.n, diags.h)
}

/// Encrypted `A x W` with uncompressed diagonals. Consumes one level.
pub fn he_matmul<B: SimdBackend>(
    be: &B,
    a: &PackedBatch<B::Ct>,
    diags: &DiagonalSet<B::Ct>,
) -> Result<PackedBatch<B::Ct>> {
    if diags.compressed {
        return Err(shape_err("use he_matmul_complex for compressed diagonals"));
    }
    matmul_impl(be, a, diags)
}

/// Encrypted `A x W` over complex-paired operands: `ceil(d / 2)` multiplications.
pub fn he_matmul_complex<B: SimdBackend>(
    be: &B,
    a: &PackedBatch<B::Ct>,
    diags: &DiagonalSet<B::Ct>,
) -> Result<PackedBatch<B::Ct>> {
    if !diags.compressed {
        return Err(shape_err("he_matmul_complex needs compressed diagonals"));
    }
    matmul_impl(be, a, diags)
}

/// Output-sized bias, replicated over the batch.
#[derive(Debug, Clone)]
pub struct Bias<C> {
    pub h: usize,
    pub n: usize,
    pub slots: WeightSlots<C>,
}

impl<C> Bias<C> {
    pub fn new(b: &[f64], n: usize) -> Self {
        let slots = b
            .iter()
            .flat_map(|&x| std::iter::repeat_n(C64::new(x, 0.0), n))
            .collect();
        Self {
            h: b.len(),
            n,
            slots: WeightSlots::Plain(slots),
        }
    }

    pub fn encrypt_with<D>(self, f: &impl Fn(&[C64]) -> Result<D>) -> Result<Bias<D>> {
        Ok(Bias {
            h: self.h,
            n: self.n,
            slots: self.slots.encrypt_with(f)?,
        })
    }
}

/// Adds `b_j` to slot `j * n + k`. No level cost.
pub fn add_bias<B: SimdBackend>(
    be: &B,
    o: &PackedBatch<B::Ct>,
    bias: &Bias<B::Ct>,
) -> Result<PackedBatch<B::Ct>> {
    if o.layout != Layout::ColumnMajor || o.shape.features() != bias.h || o.shape.n != bias.n {
        return Err(shape_err(format!(
            "bias of {} outputs x {} samples does not fit a {}x{} batch",
            bias.h,
            bias.n,
            o.shape.n,
            o.shape.features()
        )));
    }
    let data = match &bias.slots {
        WeightSlots::Plain(p) => be.add_plain(&o.data, p)?,
        WeightSlots::Encrypted(c) => be.add(&o.data, c)?,
    };
    Ok(PackedBatch { data, ..o.clone() })
}
