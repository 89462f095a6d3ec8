//! Convolution and pooling lowered to a single matrix product.
//!
//! A layer with `k` kernels of `m` filters over `m x r x c` inputs becomes
//! a `(m*r*c) x (k*oh*ow)` matrix `T` such that
//! `row_flatten(conv(X)) = row_flatten(X) * T`. Column
//! `kk*oh*ow + y*ow + x` holds the receptive-field weights of output
//! `(kk, y, x)`, so the product of a packed batch with `T` is already laid
//! out as a packed batch of the convolution output.

use serde::{Deserialize, Serialize};

use crate::backend::SimdBackend;
use crate::error::{shape_err, Result};
use crate::linalg::{generalized_diagonals, he_matmul};
use crate::matrix::Matrix;
use crate::packing::PackedBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_kernels: usize,
    pub filter: (usize, usize),
    pub input: (usize, usize),
    pub stride: (usize, usize),
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_kernels: usize,
        filter: (usize, usize),
        input: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Self> {
        let s = Self {
            in_channels,
            out_kernels,
            filter,
            input,
            stride,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.out_kernels,
            self.filter.0,
            self.filter.1,
            self.input.0,
            self.input.1,
            self.stride.0,
            self.stride.1,
        ];
        if dims.contains(&0) {
            return Err(shape_err(format!(
                "convolution dims must be positive: {self:?}"
            )));
        }
        if self.filter.0 > self.input.0 || self.filter.1 > self.input.1 {
            return Err(shape_err(format!(
                "filter {:?} larger than input {:?}",
                self.filter, self.input
            )));
        }
        self.in_features()
            .checked_mul(self.out_features())
            .ok_or_else(|| shape_err("convolution dims overflow"))?;
        Ok(())
    }

    pub fn output(&self) -> (usize, usize) {
        (
            (self.input.0 - self.filter.0) / self.stride.0 + 1,
            (self.input.1 - self.filter.1) / self.stride.1 + 1,
        )
    }

    pub fn in_features(&self) -> usize {
        self.in_channels
            .saturating_mul(self.input.0)
            .saturating_mul(self.input.1)
    }

    pub fn out_features(&self) -> usize {
        let (oh, ow) = self.output();
        self.out_kernels.saturating_mul(oh).saturating_mul(ow)
    }
}

/// `k` kernels, each `m` filters of `fh x fw`.
pub type Kernels = Vec<Vec<Matrix>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ToeplitzPlan {
    pub matrix: Matrix,
    pub spec: ConvSpec,
}

fn check_kernels(spec: &ConvSpec, kernels: &Kernels) -> Result<()> {
    if kernels.len() != spec.out_kernels {
        return Err(shape_err(format!(
            "{} kernels, spec says {}",
            kernels.len(),
            spec.out_kernels
        )));
    }
    for (kk, filters) in kernels.iter().enumerate() {
        if filters.len() != spec.in_channels {
            return Err(shape_err(format!(
                "kernel {kk} has {} filters, expected {}",
                filters.len(),
                spec.in_channels
            )));
        }
        if filters.iter().any(|f| (f.rows(), f.cols()) != spec.filter) {
            return Err(shape_err(format!(
                "kernel {kk} filter dims differ from {:?}",
                spec.filter
            )));
        }
    }
    Ok(())
}

pub fn toeplitz_from_kernel(spec: ConvSpec, kernels: &Kernels) -> Result<ToeplitzPlan> {
    spec.validate()?;
    check_kernels(&spec, kernels)?;
    let (r, c) = spec.input;
    let (oh, ow) = spec.output();
    let (fh, fw) = spec.filter;
    let (sh, sw) = spec.stride;
    let mut t = Matrix::zeros(spec.in_features(), spec.out_features());
    for (kk, filters) in kernels.iter().enumerate() {
        for y in 0..oh {
            for x in 0..ow {
                let col = kk * oh * ow + y * ow + x;
                for (ch, f) in filters.iter().enumerate() {
                    for dy in 0..fh {
                        for dx in 0..fw {
                            let row = ch * r * c + (y * sh + dy) * c + (x * sw + dx);
                            t[(row, col)] += f[(dy, dx)];
                        }
                    }
                }
            }
        }
    }
    Ok(ToeplitzPlan { matrix: t, spec })
}

/// Encrypted convolution of a packed batch with plaintext weights.
pub fn conv_layer<B: SimdBackend>(
    be: &B,
    a: &PackedBatch<B::Ct>,
    plan: &ToeplitzPlan,
) -> Result<PackedBatch<B::Ct>> {
    if a.shape.features() != plan.spec.in_features() {
        return Err(shape_err(format!(
            "input has {} features, convolution expects {}",
            a.shape.features(),
            plan.spec.in_features()
        )));
    }
    let diags = generalized_diagonals(&plan.matrix, a.shape.n)?;
    he_matmul(be, a, &diags)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Sum,
    Average,
}

/// Ones kernels (scaled for averaging) on the channel diagonal.
pub fn pool_kernels(kind: PoolKind, channels: usize, window: (usize, usize)) -> Kernels {
    let value = match kind {
        PoolKind::Sum => 1.0,
        PoolKind::Average => 1.0 / (window.0 * window.1) as f64,
    };
    (0..channels)
        .map(|kk| {
            (0..channels)
                .map(|ch| {
                    let v = if ch == kk { value } else { 0.0 };
                    Matrix::from_fn(window.0, window.1, |_, _| v)
                })
                .collect()
        })
        .collect()
}

pub fn pool_spec(
    channels: usize,
    window: (usize, usize),
    stride: (usize, usize),
    input: (usize, usize),
) -> Result<ConvSpec> {
    ConvSpec::new(channels, channels, window, input, stride)
}

pub fn pool_plan(
    kind: PoolKind,
    window: (usize, usize),
    stride: (usize, usize),
    channels: usize,
    input: (usize, usize),
) -> Result<ToeplitzPlan> {
    let spec = pool_spec(channels, window, stride, input)?;
    toeplitz_from_kernel(spec, &pool_kernels(kind, channels, window))
}

/// Per-channel bias spread over each output channel's `oh * ow` block.
pub fn channel_bias(spec: &ConvSpec, bias: &[f64]) -> Result<Vec<f64>> {
    if bias.len() != spec.out_kernels {
        return Err(shape_err(format!(
            "{} biases for {} kernels",
            bias.len(),
            spec.out_kernels
        )));
    }
    let (oh, ow) = spec.output();
    Ok(bias
        .iter()
        .flat_map(|&b| std::iter::repeat_n(b, oh * ow))
        .collect())
}

/// Direct multi-channel cross-correlation (no kernel flip, no padding).
pub fn cross_correlate(
    spec: &ConvSpec,
    input: &[Matrix],
    kernels: &Kernels,
) -> Result<Vec<Matrix>> {
    spec.validate()?;
    check_kernels(spec, kernels)?;
    if input.len() != spec.in_channels
        || input.iter().any(|ch| (ch.rows(), ch.cols()) != spec.input)
    {
        return Err(shape_err("input does not match convolution spec"));
    }
    let (oh, ow) = spec.output();
    let (fh, fw) = spec.filter;
    let (sh, sw) = spec.stride;
    Ok(kernels
        .iter()
        .map(|filters| {
            Matrix::from_fn(oh, ow, |y, x| {
                let mut acc = 0.0;
                for (ch, f) in filters.iter().enumerate() {
                    for dy in 0..fh {
                        for dx in 0..fw {
                            acc += input[ch][(y * sh + dy, x * sw + dx)] * f[(dy, dx)];
                        }
                    }
                }
                acc
            })
        })
        .collect())
}

/// Direct per-channel sum or average pooling.
pub fn pool_direct(
    kind: PoolKind,
    window: (usize, usize),
    stride: (usize, usize),
    input: &[Matrix],
) -> Result<Vec<Matrix>> {
    let first = input
        .first()
        .ok_or_else(|| shape_err("pooling input without channels"))?;
    let spec = pool_spec(input.len(), window, stride, (first.rows(), first.cols()))?;
    let (oh, ow) = spec.output();
    let scale = match kind {
        PoolKind::Sum => 1.0,
        PoolKind::Average => 1.0 / (window.0 * window.1) as f64,
    };
    Ok(input
        .iter()
        .map(|ch| {
            Matrix::from_fn(oh, ow, |y, x| {
                let mut acc = 0.0;
                for dy in 0..window.0 {
                    for dx in 0..window.1 {
                        acc += ch[(y * stride.0 + dy, x * stride.1 + dx)];
                    }
                }
                acc * scale
            })
        })
        .collect())
}
