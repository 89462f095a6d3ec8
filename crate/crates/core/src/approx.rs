//! Chebyshev interpolation of activations and their encrypted evaluation.
//!
//! Encrypted evaluation maps inputs to `[-1, 1]` (one level), then splits
//! `p = q + r * T_m` with `m` the largest power of two below the padded
//! length and recurses down to two-term polynomials `c0 + c1 * T_1`. Only
//! `T_1, T_2, T_4, ...` are materialised, built by `T_2m = 2 T_m^2 - 1`.
//! A polynomial with `2^k` coefficients costs `k` levels, so a degree `g`
//! approximation costs `ceil(log2(g + 1)) + 1` levels in total.
//!
//! Coefficient products use the mask of valid slots, so the output is zero
//! outside the packed data.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::backend::{OpCounters, SimdBackend, C64};
use crate::error::{Error, Result};
use crate::packing::PackedBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationFn {
    Softplus,
    Silu,
    Sigmoid,
    Tanh,
    Relu,
    Square,
    Identity,
}

impl ActivationFn {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            // log(1 + e^x) without overflow for large x
            ActivationFn::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            ActivationFn::Silu => x / (1.0 + (-x).exp()),
            ActivationFn::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            ActivationFn::Tanh => x.tanh(),
            ActivationFn::Relu => x.max(0.0),
            ActivationFn::Square => x * x,
            ActivationFn::Identity => x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationFn::Softplus => "softplus",
            ActivationFn::Silu => "silu",
            ActivationFn::Sigmoid => "sigmoid",
            ActivationFn::Tanh => "tanh",
            ActivationFn::Relu => "relu",
            ActivationFn::Square => "square",
            ActivationFn::Identity => "identity",
        }
    }
}

impl std::str::FromStr for ActivationFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "softplus" => ActivationFn::Softplus,
            "silu" | "swish" => ActivationFn::Silu,
            "sigmoid" => ActivationFn::Sigmoid,
            "tanh" => ActivationFn::Tanh,
            "relu" => ActivationFn::Relu,
            "square" => ActivationFn::Square,
            "identity" => ActivationFn::Identity,
            other => {
                return Err(Error::Parse(format!(
                    "unknown activation function {other:?}"
                )))
            }
        })
    }
}

/// Default approximation interval for activations.
pub const DEFAULT_INTERVAL: (f64, f64) = (-8.0, 8.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChebApprox {
    pub interval: (f64, f64),
    pub degree: usize,
    pub coeffs: Vec<f64>,
    pub max_abs_error: f64,
    pub depth_cost: u32,
}

/// Levels consumed by [`eval_cheb_encrypted`] for a given degree.
pub fn depth_cost(degree: usize) -> u32 {
    if degree == 0 {
        1
    } else {
        ceil_log2(degree + 1) + 1
    }
}

fn ceil_log2(x: usize) -> u32 {
    x.next_power_of_two().trailing_zeros()
}

/// Highest supported approximation degree.
pub const MAX_DEGREE: usize = 1023;

/// Interpolates `f` at the `degree + 1` Chebyshev points of the first kind on `[a, b]`.
pub fn chebyshev_fit(f: impl Fn(f64) -> f64, a: f64, b: f64, degree: usize) -> Result<ChebApprox> {
    if degree > MAX_DEGREE {
        return Err(Error::Domain(format!(
            "degree {degree} above the supported {MAX_DEGREE}"
        )));
    }
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(Error::Domain(format!("invalid interval [{a}, {b}]")));
    }
    let nodes = degree + 1;
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let values: Vec<f64> = (0..nodes)
        .map(|k| {
            let t = (PI * (k as f64 + 0.5) / nodes as f64).cos();
            let x = half * t + mid;
            let y = f(x);
            if y.is_finite() {
                Ok(y)
            } else {
                Err(Error::Domain(format!("f({x}) is not finite")))
            }
        })
        .collect::<Result<_>>()?;
    let mut coeffs: Vec<f64> = (0..nodes)
        .map(|j| {
            let s: f64 = values
                .iter()
                .enumerate()
                .map(|(k, y)| y * (PI * j as f64 * (k as f64 + 0.5) / nodes as f64).cos())
                .sum();
            2.0 * s / nodes as f64
        })
        .collect();
    coeffs[0] *= 0.5;
    let mut approx = ChebApprox {
        interval: (a, b),
        degree,
        coeffs,
        max_abs_error: 0.0,
        depth_cost: depth_cost(degree),
    };
    let grid = (10 * degree).max(1000);
    let mut err: f64 = 0.0;
    for i in 0..=grid {
        let x = a + (b - a) * i as f64 / grid as f64;
        let y = f(x);
        if !y.is_finite() {
            return Err(Error::Domain(format!("f({x}) is not finite")));
        }
        err = err.max((approx.eval(x) - y).abs());
    }
    approx.max_abs_error = err;
    Ok(approx)
}

/// Fit of a named activation.
pub fn fit_activation(
    func: ActivationFn,
    interval: (f64, f64),
    degree: usize,
) -> Result<ChebApprox> {
    chebyshev_fit(|x| func.eval(x), interval.0, interval.1, degree)
}

impl ChebApprox {
    /// Maps `x` from the approximation interval onto `[-1, 1]`.
    pub fn to_unit(&self, x: f64) -> f64 {
        let (a, b) = self.interval;
        (2.0 * x - a - b) / (b - a)
    }

    /// Plaintext evaluation by the Clenshaw recurrence.
    pub fn eval(&self, x: f64) -> f64 {
        let t = self.to_unit(x);
        let (mut b1, mut b2) = (0.0, 0.0);
        for &c in self.coeffs.iter().skip(1).rev() {
            let b0 = 2.0 * t * b1 - b2 + c;
            b2 = b1;
            b1 = b0;
        }
        t * b1 - b2 + self.coeffs[0]
    }
}

/// Splits `c` (length `2m`) into `(q, r)` with `sum c_i T_i = q + r * T_m`.
fn split_at_power(c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = c.len() / 2;
    let mut q = c[..m].to_vec();
    let mut r = vec![0.0; m];
    r[0] = c[m];
    for j in 1..m {
        q[m - j] -= c[m + j];
        r[j] = 2.0 * c[m + j];
    }
    (q, r)
}

fn scaled_mask(mask: &[C64], c: f64) -> Vec<C64> {
    mask.iter().map(|z| z * c).collect()
}

fn eval_split<B: SimdBackend>(
    be: &B,
    coeffs: &[f64],
    powers: &[B::Ct],
    mask: &[C64],
) -> Result<B::Ct> {
    if coeffs.len() == 2 {
        let lin = be.mul_plain(&powers[0], &scaled_mask(mask, coeffs[1]))?;
        return be.add_plain(&lin, &scaled_mask(mask, coeffs[0]));
    }
    let (q, r) = split_at_power(coeffs);
    let idx = (coeffs.len() / 2).trailing_zeros() as usize;
    let q_ct = eval_split(be, &q, powers, mask)?;
    let r_ct = eval_split(be, &r, powers, mask)?;
    let prod = be.mul(&r_ct, &powers[idx])?;
    be.add(&q_ct, &prod)
}

/// Evaluates `approx` slot-wise on an encrypted batch.
pub fn eval_cheb_encrypted<B: SimdBackend>(
    be: &B,
    ct: &PackedBatch<B::Ct>,
    approx: &ChebApprox,
) -> Result<PackedBatch<B::Ct>> {
    let level = be.level(&ct.data);
    if level < approx.depth_cost {
        return Err(Error::LevelExhausted {
            level,
            needed: approx.depth_cost,
        });
    }
    let s = be.params().slot_count;
    let mut mask = vec![C64::new(0.0, 0.0); s];
    mask[..ct.valid_len.min(s)].fill(C64::new(1.0, 0.0));

    let data = if approx.degree == 0 {
        let zero = be.mul_plain(&ct.data, &scaled_mask(&mask, 0.0))?;
        be.add_plain(&zero, &scaled_mask(&mask, approx.coeffs[0]))?
    } else {
        let (a, b) = approx.interval;
        let alpha = 2.0 / (b - a);
        let beta = -(a + b) / (b - a);
        let scaled = be.mul_const(&ct.data, C64::new(alpha, 0.0))?;
        let t1 = be.add_plain(&scaled, &vec![C64::new(beta, 0.0); s])?;

        let k = ceil_log2(approx.degree + 1) as usize;
        let minus_one = vec![C64::new(-1.0, 0.0); s];
        let mut powers = vec![t1];
        for _ in 1..k {
            let last = powers.last().expect("non-empty");
            let twice = be.add(last, last)?;
            let sq = be.mul(&twice, last)?;
            powers.push(be.add_plain(&sq, &minus_one)?);
        }
        let mut coeffs = approx.coeffs.clone();
        coeffs.resize(1 << k, 0.0);
        eval_split(be, &coeffs, &powers, &mask)?
    };
    Ok(PackedBatch { data, ..ct.clone() })
}

/// Operation counts of one [`eval_cheb_encrypted`] call.
pub fn cheb_op_counts(degree: usize) -> OpCounters {
    if degree == 0 {
        return OpCounters {
            pt_mults: 1,
            adds: 1,
            ..Default::default()
        };
    }
    let k = u64::from(ceil_log2(degree + 1));
    let leaves = 1u64 << (k - 1);
    OpCounters {
        ct_mults: (k - 1) + (leaves - 1),
        pt_mults: 1 + leaves,
        adds: 1 + 2 * (k - 1) + leaves + (leaves - 1),
        ..Default::default()
    }
}
