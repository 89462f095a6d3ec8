//! Block-matrix arithmetic, the operation cost model and the batch/split search.
//!
//! An `n x d` input is cut into a `q x p` grid of `ceil(n/q) x ceil(d/p)`
//! blocks (zero padded), and a `d x h` weight matrix into `p x m` blocks.
//! Output block `(i, j)` is `sum_k A[i][k] W[k][j]`. The rotations of each
//! input block are computed once and shared by all `m` output columns.
//!
//! [`cost_of`] predicts the exact counters an execution of a plan produces.
//! [`plan_search`] minimises weighted multiplications per sample, then
//! rotations, then bootstraps, with a dynamic program over the split chain.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::{cheb_op_counts, depth_cost};
use crate::backend::{HeParams, OpCounters, SimdBackend, C64};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{
    check_operands, compressed_diagonals, diag_count, diagonal_products, extract_real,
    generalized_diagonals, output_batch, replication_steps, rotated_inputs, tree_sum, Bias,
    DiagonalSet, WeightSlots,
};
use crate::matrix::Matrix;
use crate::packing::{complex_compress_input, pack_matrix, unpack_batch, PackedBatch};

/// Who holds what in clear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Scenario {
    /// Client data encrypted, model in clear at the provider.
    EncryptedData,
    /// Model encrypted by the provider, evaluated by the client on its own data.
    EncryptedModel,
    /// Data and model under a key shared by a cohort of providers.
    Collective,
}

impl Scenario {
    pub fn number(self) -> u8 {
        match self {
            Scenario::EncryptedData => 1,
            Scenario::EncryptedModel => 2,
            Scenario::Collective => 3,
        }
    }

    /// Whether matmul weights are ciphertexts.
    pub fn encrypted_weights(self) -> bool {
        self != Scenario::EncryptedData
    }
}

impl TryFrom<u8> for Scenario {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Scenario::EncryptedData),
            2 => Ok(Scenario::EncryptedModel),
            3 => Ok(Scenario::Collective),
            _ => Err(Error::Config(format!(
                "scenario must be 1, 2 or 3, got {v}"
            ))),
        }
    }
}

impl From<Scenario> for u8 {
    fn from(s: Scenario) -> u8 {
        s.number()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BootstrapMode {
    Centralized,
    Collective,
}

/// Deployment facts the cost model depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deployment {
    pub scenario: Scenario,
    pub bootstrap: BootstrapMode,
    /// Cohort size; only meaningful for [`Scenario::Collective`].
    pub parties: u32,
}

impl Deployment {
    /// Collective refresh for a cohort, centralized bootstrapping otherwise.
    pub fn new(scenario: Scenario, parties: u32) -> Result<Self> {
        let bootstrap = if scenario == Scenario::Collective {
            BootstrapMode::Collective
        } else {
            BootstrapMode::Centralized
        };
        let d = Self {
            scenario,
            bootstrap,
            parties,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn with_bootstrap(mut self, mode: BootstrapMode) -> Result<Self> {
        self.bootstrap = mode;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenario == Scenario::Collective && self.parties < 2 {
            return Err(Error::Config(format!(
                "a cohort needs at least 2 parties, got {}",
                self.parties
            )));
        }
        if self.bootstrap == BootstrapMode::Collective && self.scenario != Scenario::Collective {
            return Err(Error::Config(
                "collective bootstrapping needs scenario 3".into(),
            ));
        }
        Ok(())
    }

    fn share_messages(&self) -> u64 {
        2 * (u64::from(self.parties) - 1)
    }
}

/// Shape of one pipeline stage as seen by the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageShape {
    Linear {
        d_in: usize,
        d_out: usize,
        bias: bool,
    },
    Activation {
        degree: usize,
    },
}

/// Grid of one linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSplit {
    pub q: usize,
    pub p: usize,
    pub m: usize,
    /// Diagonals per weight block.
    pub diag_count: usize,
    pub compressed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub batch: usize,
    pub layers: Vec<LayerSplit>,
    pub predicted_cost: OpCounters,
    #[serde(default = "default_true")]
    pub feasible: bool,
}

fn default_true() -> bool {
    true
}

impl BlockPlan {
    pub fn q(&self) -> usize {
        self.layers.first().map_or(1, |l| l.q)
    }

    /// Samples per row block.
    pub fn block_rows(&self) -> usize {
        self.batch.div_ceil(self.q())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchConfig {
    pub ct_weight: u64,
    pub pt_weight: u64,
    /// Upper bound on `p` and `m`.
    pub max_split: usize,
    pub allow_compression: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            ct_weight: 1,
            pt_weight: 1,
            max_split: 64,
            allow_compression: true,
        }
    }
}

impl SearchConfig {
    /// Objective tuple, compared lexicographically.
    pub fn key(&self, c: &OpCounters) -> [u64; 3] {
        [
            self.ct_weight * c.ct_mults + self.pt_weight * c.pt_mults,
            c.rotations,
            c.bootstraps,
        ]
    }
}

/// `a / x` against `b / y`, lexicographically.
pub fn cmp_per_sample(a: [u64; 3], x: usize, b: [u64; 3], y: usize) -> Ordering {
    for (u, v) in a.iter().zip(&b) {
        let o = (u128::from(*u) * y as u128).cmp(&(u128::from(*v) * x as u128));
        if o != Ordering::Equal {
            return o;
        }
    }
    Ordering::Equal
}

// ---------------------------------------------------------------------------
// Block matrices

/// `q x p` grid of packed blocks, row-major.
#[derive(Debug, Clone)]
pub struct BlockMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub q: usize,
    pub p: usize,
    pub block_rows: usize,
    pub block_cols: usize,
    pub blocks: Vec<PackedBatch<T>>,
}

impl<T> BlockMatrix<T> {
    pub fn block(&self, i: usize, k: usize) -> &PackedBatch<T> {
        &self.blocks[i * self.p + k]
    }

    pub fn try_map<U>(self, mut f: impl FnMut(T) -> Result<U>) -> Result<BlockMatrix<U>> {
        let blocks = self
            .blocks
            .into_iter()
            .map(|b| b.try_map(&mut f))
            .collect::<Result<_>>()?;
        Ok(BlockMatrix {
            rows: self.rows,
            cols: self.cols,
            q: self.q,
            p: self.p,
            block_rows: self.block_rows,
            block_cols: self.block_cols,
            blocks,
        })
    }
}

fn grid(dim: usize, parts: usize, what: &str) -> Result<usize> {
    if parts == 0 || dim == 0 {
        return Err(shape_err(format!(
            "{what}: cannot split {dim} into {parts} parts"
        )));
    }
    Ok(dim.div_ceil(parts))
}

fn partition_with(
    a: &Matrix,
    q: usize,
    p: usize,
    pack: impl Fn(&Matrix) -> Result<PackedBatch<Vec<C64>>>,
) -> Result<BlockMatrix<Vec<C64>>> {
    let br = grid(a.rows(), q, "rows")?;
    let bc = grid(a.cols(), p, "cols")?;
    let mut blocks = Vec::with_capacity(q * p);
    for i in 0..q {
        for k in 0..p {
            blocks.push(pack(&a.sub_block(i * br, k * bc, br, bc))?);
        }
    }
    Ok(BlockMatrix {
        rows: a.rows(),
        cols: a.cols(),
        q,
        p,
        block_rows: br,
        block_cols: bc,
        blocks,
    })
}

/// Splits `a` into `q x p` zero-padded blocks, each packed column-major.
pub fn partition(
    a: &Matrix,
    q: usize,
    p: usize,
    slot_count: usize,
) -> Result<BlockMatrix<Vec<C64>>> {
    partition_with(a, q, p, |b| pack_matrix(b, slot_count))
}

/// [`partition`] with complex-paired blocks.
pub fn partition_compressed(
    a: &Matrix,
    q: usize,
    p: usize,
    slot_count: usize,
) -> Result<BlockMatrix<Vec<C64>>> {
    partition_with(a, q, p, |b| complex_compress_input(b, slot_count))
}

/// Reassembles plaintext blocks and drops padding.
pub fn assemble(b: &BlockMatrix<Vec<C64>>) -> Result<Matrix> {
    if b.blocks.len() != b.q * b.p {
        return Err(shape_err("block grid is incomplete"));
    }
    let mut out = Matrix::zeros(b.rows, b.cols);
    for i in 0..b.q {
        for k in 0..b.p {
            let blk = unpack_batch(b.block(i, k))?;
            for r in 0..b.block_rows {
                for c in 0..b.block_cols {
                    let (gr, gc) = (i * b.block_rows + r, k * b.block_cols + c);
                    if gr < b.rows && gc < b.cols {
                        out[(gr, gc)] = blk[(r, c)];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// A `d x h` weight matrix cut into `p x m` diagonal-form blocks, with an
/// optional bias per output column block.
#[derive(Debug, Clone)]
pub struct BlockWeights<C> {
    pub rows: usize,
    pub cols: usize,
    pub p: usize,
    pub m: usize,
    pub block_rows: usize,
    pub block_cols: usize,
    pub compressed: bool,
    pub blocks: Vec<DiagonalSet<C>>,
    pub bias: Option<Vec<Bias<C>>>,
}

impl<C> BlockWeights<C> {
    pub fn block(&self, k: usize, j: usize) -> &DiagonalSet<C> {
        &self.blocks[k * self.m + j]
    }

    pub fn encrypt_with<D>(self, f: &impl Fn(&[C64]) -> Result<D>) -> Result<BlockWeights<D>> {
        let blocks = self
            .blocks
            .into_iter()
            .map(|b| b.encrypt_with(f))
            .collect::<Result<_>>()?;
        let bias = match self.bias {
            Some(v) => Some(
                v.into_iter()
                    .map(|b| b.encrypt_with(f))
                    .collect::<Result<_>>()?,
            ),
            None => None,
        };
        Ok(BlockWeights {
            rows: self.rows,
            cols: self.cols,
            p: self.p,
            m: self.m,
            block_rows: self.block_rows,
            block_cols: self.block_cols,
            compressed: self.compressed,
            blocks,
            bias,
        })
    }
}

/// Cuts `w` into `p x m` blocks replicated for `n` samples per row block.
pub fn partition_weights<C>(
    w: &Matrix,
    bias: Option<&[f64]>,
    p: usize,
    m: usize,
    n: usize,
    compressed: bool,
) -> Result<BlockWeights<C>> {
    let br = grid(w.rows(), p, "weight rows")?;
    let bc = grid(w.cols(), m, "weight cols")?;
    if let Some(b) = bias {
        if b.len() != w.cols() {
            return Err(shape_err(format!(
                "bias has {} entries for {} outputs",
                b.len(),
                w.cols()
            )));
        }
    }
    let mut blocks = Vec::with_capacity(p * m);
    for k in 0..p {
        for j in 0..m {
            let blk = w.sub_block(k * br, j * bc, br, bc);
            blocks.push(if compressed {
                compressed_diagonals(&blk, n)?
            } else {
                generalized_diagonals(&blk, n)?
            });
        }
    }
    let bias = bias.map(|b| {
        (0..m)
            .map(|j| {
                let part: Vec<f64> = (0..bc)
                    .map(|c| b.get(j * bc + c).copied().unwrap_or(0.0))
                    .collect();
                Bias::new(&part, n)
            })
            .collect()
    });
    Ok(BlockWeights {
        rows: w.rows(),
        cols: w.cols(),
        p,
        m,
        block_rows: br,
        block_cols: bc,
        compressed,
        blocks,
        bias,
    })
}

/// `O[i][j] = sum_k A[i][k] W[k][j]` (plus bias). Blocks are evaluated in
/// parallel; every output block is reduced in a fixed order.
pub fn block_matmul<B: SimdBackend>(
    be: &B,
    a: &BlockMatrix<B::Ct>,
    w: &BlockWeights<B::Ct>,
) -> Result<BlockMatrix<B::Ct>> {
    if a.p != w.p || a.cols != w.rows || a.block_cols != w.block_rows {
        return Err(shape_err(format!(
            "grid mismatch: input {}x{} in {} column blocks, weights {}x{} in {} row blocks",
            a.rows, a.cols, a.p, w.rows, w.cols, w.p
        )));
    }
    if a.blocks.len() != a.q * a.p || w.blocks.len() != w.p * w.m {
        return Err(shape_err("block grid is incomplete"));
    }
    for (idx, blk) in a.blocks.iter().enumerate() {
        check_operands(blk, w.block(idx % a.p, 0))?;
    }
    let rotated: Vec<Vec<B::Ct>> = a
        .blocks
        .par_iter()
        .map(|blk| rotated_inputs(be, blk, w.block_cols))
        .collect::<Result<_>>()?;
    let blocks = (0..a.q * w.m)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / w.m, idx % w.m);
            let mut products = Vec::new();
            for k in 0..a.p {
                products.extend(diagonal_products(be, &rotated[i * a.p + k], w.block(k, j))?);
            }
            let mut out = tree_sum(be, products)?;
            if w.compressed {
                out = extract_real(be, &out)?;
            }
            if let Some(bias) = &w.bias {
                out = match &bias[j].slots {
                    WeightSlots::Plain(p) => be.add_plain(&out, p)?,
                    WeightSlots::Encrypted(c) => be.add(&out, c)?,
                };
            }
            output_batch(out, a.block_rows, w.block_cols)
        })
        .collect::<Result<_>>()?;
    Ok(BlockMatrix {
        rows: a.rows,
        cols: w.cols,
        q: a.q,
        p: w.m,
        block_rows: a.block_rows,
        block_cols: w.block_cols,
        blocks,
    })
}

/// Zero-pads the `N` rows of `inputs` into `ceil(N / batch)` batches of `batch` rows.
pub fn sub_batch(inputs: &Matrix, batch: usize) -> Vec<Matrix> {
    let batch = batch.max(1);
    (0..inputs.rows().div_ceil(batch))
        .map(|b| inputs.sub_block(b * batch, 0, batch, inputs.cols()))
        .collect()
}

// ---------------------------------------------------------------------------
// Cost model

/// Refresh decision in front of a stage. Fixed by the level budget alone,
/// so it does not depend on the split grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Refresh {
    None,
    /// Unencrypted data re-encoded at the top level for free.
    Reencode,
    Centralized,
    Collective,
}

fn stage_need(st: &StageShape) -> u32 {
    match st {
        StageShape::Linear { .. } => 1,
        StageShape::Activation { degree } => depth_cost(*degree),
    }
}

fn level_walk(stages: &[StageShape], params: &HeParams, dep: &Deployment) -> Result<Vec<Refresh>> {
    let mut level = params.max_level;
    let mut plain = dep.scenario == Scenario::EncryptedModel;
    let mut out = Vec::with_capacity(stages.len());
    for (idx, st) in stages.iter().enumerate() {
        let need = stage_need(st);
        let mut r = Refresh::None;
        if level < need {
            (r, level) = if plain {
                (Refresh::Reencode, params.max_level)
            } else {
                match dep.bootstrap {
                    BootstrapMode::Centralized => {
                        (Refresh::Centralized, params.post_bootstrap_level)
                    }
                    BootstrapMode::Collective => (Refresh::Collective, params.max_level),
                }
            };
            if level < need {
                return Err(Error::Infeasible(format!(
                    "stage {idx} needs {need} levels but a refresh only restores {level}"
                )));
            }
        }
        level -= need;
        if matches!(st, StageShape::Linear { .. }) {
            plain = false;
        }
        out.push(r);
    }
    Ok(out)
}

fn refresh_cost(r: Refresh, blocks: u64, params: &HeParams, dep: &Deployment) -> OpCounters {
    match r {
        Refresh::None | Refresh::Reencode => OpCounters::default(),
        Refresh::Centralized => OpCounters {
            bootstraps: blocks,
            bootstrap_levels: blocks * u64::from(params.bootstrap_depth_cost),
            ..Default::default()
        },
        Refresh::Collective => OpCounters {
            bootstraps: blocks,
            protocol_rounds: blocks,
            protocol_messages: blocks * dep.share_messages(),
            ..Default::default()
        },
    }
}

#[allow(clippy::too_many_arguments)]
fn linear_cost(
    (d_in, d_out, bias): (usize, usize, bool),
    scenario: Scenario,
    slot_count: usize,
    q: usize,
    n_b: usize,
    p: usize,
    m: usize,
    compressed: bool,
) -> Result<OpCounters> {
    let d_b = d_in.div_ceil(p);
    let h_b = d_out.div_ceil(m);
    if p == 0 || m == 0 || (p - 1) * d_b >= d_in || (m - 1) * h_b >= d_out {
        return Err(Error::Infeasible(format!(
            "split {p}x{m} leaves a fully padded block for {d_in}x{d_out}"
        )));
    }
    let diags = diag_count(d_b, compressed);
    let steps = replication_steps(diags, h_b, n_b, slot_count)
        .map_err(|e| Error::Infeasible(e.to_string()))?;
    let (q, p, m, dg, steps) = (q as u64, p as u64, m as u64, diags as u64, u64::from(steps));
    let mults = q * p * m * dg;
    let mut c = OpCounters {
        rotations: q * p * (dg - 1 + steps),
        adds: q * p * steps + q * m * (p * dg - 1),
        ..Default::default()
    };
    if scenario.encrypted_weights() {
        c.ct_mults = mults;
    } else {
        c.pt_mults = mults;
    }
    if compressed {
        c.conjugations = q * m;
        c.adds += q * m;
    }
    if bias {
        c.adds += q * m;
    }
    Ok(c)
}

fn delivery_cost(dep: &Deployment, blocks: u64) -> OpCounters {
    match dep.scenario {
        Scenario::EncryptedData => OpCounters::default(),
        // mask addition, then one round trip per block
        Scenario::EncryptedModel => OpCounters {
            adds: blocks,
            protocol_rounds: blocks,
            protocol_messages: 2 * blocks,
            ..Default::default()
        },
        Scenario::Collective => OpCounters {
            protocol_rounds: blocks,
            protocol_messages: blocks * dep.share_messages(),
            ..Default::default()
        },
    }
}

fn linear_dims(stages: &[StageShape]) -> Vec<(usize, usize, bool)> {
    stages
        .iter()
        .filter_map(|s| match *s {
            StageShape::Linear { d_in, d_out, bias } => Some((d_in, d_out, bias)),
            StageShape::Activation { .. } => None,
        })
        .collect()
}

/// Compression is only possible on the first linear stage fed directly by packed input.
fn compressible(stages: &[StageShape]) -> bool {
    matches!(stages.first(), Some(StageShape::Linear { .. }))
}

fn check_stages(stages: &[StageShape]) -> Result<()> {
    let dims = linear_dims(stages);
    if dims.is_empty() {
        return Err(shape_err("model has no linear stage"));
    }
    for w in dims.windows(2) {
        if w[0].1 != w[1].0 {
            return Err(shape_err(format!(
                "layer output {} does not feed input {}",
                w[0].1, w[1].0
            )));
        }
    }
    Ok(())
}

/// Exact counters of one execution of `plan` on a full batch.
pub fn cost_of(
    plan: &BlockPlan,
    stages: &[StageShape],
    params: &HeParams,
    dep: &Deployment,
) -> Result<OpCounters> {
    dep.validate()?;
    check_stages(stages)?;
    let dims = linear_dims(stages);
    if plan.layers.len() != dims.len() {
        return Err(shape_err(format!(
            "plan has {} layers, model has {} linear stages",
            plan.layers.len(),
            dims.len()
        )));
    }
    let q = plan.q();
    if plan.batch == 0 || q == 0 || plan.layers.iter().any(|l| l.q != q) {
        return Err(Error::Infeasible(
            "batch and row split must be positive and uniform".into(),
        ));
    }
    let n_b = plan.block_rows();
    if (q - 1) * n_b >= plan.batch {
        return Err(Error::Infeasible(format!(
            "{q} row blocks of {n_b} leave one fully padded"
        )));
    }
    for (l, w) in plan.layers.windows(2).enumerate() {
        if w[1].p != w[0].m {
            return Err(Error::Infeasible(format!(
                "layer {} has p = {} but previous m = {}",
                l + 1,
                w[1].p,
                w[0].m
            )));
        }
    }
    for (l, (sp, d)) in plan.layers.iter().zip(&dims).enumerate() {
        if sp.compressed && !(l == 0 && compressible(stages)) {
            return Err(Error::Infeasible(format!(
                "layer {l} cannot take complex-paired input"
            )));
        }
        if sp.p == 0 || sp.diag_count != diag_count(d.0.div_ceil(sp.p), sp.compressed) {
            return Err(Error::Infeasible(format!(
                "layer {l} diag_count {} is inconsistent",
                sp.diag_count
            )));
        }
    }

    let walk = level_walk(stages, params, dep)?;
    let mut total = OpCounters::default();
    let mut cols = plan.layers[0].p;
    let mut li = 0;
    for (st, r) in stages.iter().zip(walk) {
        match st {
            StageShape::Linear { .. } => {
                let sp = plan.layers[li];
                total += refresh_cost(r, (q * sp.p) as u64, params, dep);
                total += linear_cost(
                    dims[li],
                    dep.scenario,
                    params.slot_count,
                    q,
                    n_b,
                    sp.p,
                    sp.m,
                    sp.compressed,
                )?;
                cols = sp.m;
                li += 1;
            }
            StageShape::Activation { degree } => {
                let blocks = (q * cols) as u64;
                total += refresh_cost(r, blocks, params, dep);
                total += cheb_op_counts(*degree).scaled(blocks);
            }
        }
    }
    total += delivery_cost(dep, (q * cols) as u64);
    Ok(total)
}

/// Split counts of `dim` in `1..=max` that leave no fully padded block.
pub fn split_candidates(dim: usize, max: usize) -> Vec<usize> {
    (1..=dim.min(max))
        .filter(|&k| (k - 1) * dim.div_ceil(k) < dim)
        .collect()
}

fn better(cfg: &SearchConfig, a: &OpCounters, b: Option<&OpCounters>) -> bool {
    b.is_none_or(|b| cfg.key(a) < cfg.key(b))
}

#[derive(Clone, Copy)]
struct Cell {
    cost: OpCounters,
    from: usize,
    compressed: bool,
}

/// Best split chain for fixed `q` and block rows `n_b`.
fn best_chain(
    stages: &[StageShape],
    walk: &[Refresh],
    params: &HeParams,
    dep: &Deployment,
    cfg: &SearchConfig,
    q: usize,
    n_b: usize,
) -> Option<(OpCounters, Vec<LayerSplit>)> {
    let dims = linear_dims(stages);
    let width = cfg.max_split + 1;
    let s = params.slot_count;

    // segment costs: everything after linear stage l up to the next one, as a function of cols
    let segment = |from: usize, to: usize, cols: usize| -> OpCounters {
        let mut c = OpCounters::default();
        for idx in from..to {
            if let StageShape::Activation { degree } = stages[idx] {
                let blocks = (q * cols) as u64;
                c += refresh_cost(walk[idx], blocks, params, dep);
                c += cheb_op_counts(degree).scaled(blocks);
            }
        }
        c
    };
    let lin_pos: Vec<usize> = stages
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, StageShape::Linear { .. }))
        .map(|(i, _)| i)
        .collect();

    let mut state: Vec<Option<OpCounters>> = vec![None; width];
    for p in split_candidates(dims[0].0, cfg.max_split) {
        state[p] = Some(segment(0, lin_pos[0], p));
    }
    let mut back: Vec<Vec<Option<Cell>>> = Vec::with_capacity(dims.len());
    for (l, &d) in dims.iter().enumerate() {
        let next = lin_pos.get(l + 1).copied().unwrap_or(stages.len());
        let comp_opts: &[bool] = if l == 0 && cfg.allow_compression && compressible(stages) {
            &[false, true]
        } else {
            &[false]
        };
        let mut cells: Vec<Option<Cell>> = vec![None; width];
        let ms = split_candidates(d.1, cfg.max_split);
        let posts: Vec<OpCounters> = ms
            .iter()
            .map(|&m| segment(lin_pos[l] + 1, next, m))
            .collect();
        for (p, before) in state.iter().enumerate() {
            let Some(before) = before else { continue };
            let pre = refresh_cost(walk[lin_pos[l]], (q * p) as u64, params, dep);
            for (&m, post) in ms.iter().zip(&posts) {
                for &compressed in comp_opts {
                    let Ok(lin) = linear_cost(d, dep.scenario, s, q, n_b, p, m, compressed) else {
                        continue;
                    };
                    let cost = *before + pre + lin + *post;
                    if better(cfg, &cost, cells[m].as_ref().map(|c| &c.cost)) {
                        cells[m] = Some(Cell {
                            cost,
                            from: p,
                            compressed,
                        });
                    }
                }
            }
        }
        state = cells.iter().map(|c| c.map(|c| c.cost)).collect();
        back.push(cells);
    }
    let mut best: Option<(OpCounters, usize)> = None;
    for (m, c) in state.iter().enumerate() {
        if let Some(c) = c {
            let tot = *c + delivery_cost(dep, (q * m) as u64);
            if better(cfg, &tot, best.as_ref().map(|b| &b.0)) {
                best = Some((tot, m));
            }
        }
    }
    let (cost, mut m) = best?;
    let mut layers = Vec::with_capacity(dims.len());
    for l in (0..dims.len()).rev() {
        let cell = back[l][m].expect("reachable cell");
        let p = cell.from;
        layers.push(LayerSplit {
            q,
            p,
            m,
            diag_count: diag_count(dims[l].0.div_ceil(p), cell.compressed),
            compressed: cell.compressed,
        });
        m = p;
    }
    layers.reverse();
    Some((cost, layers))
}

/// Block rows worth trying when the batch is free: the optimum always sits
/// at the largest feasible batch of some split chain, which has the form `s / x`.
pub(crate) fn free_batch_candidates(slot_count: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (1..=slot_count).map(|x| slot_count / x).collect();
    v.dedup();
    v
}

/// Best single-block plan with exactly `rows` samples per ciphertext.
pub fn plan_for_rows(
    stages: &[StageShape],
    params: &HeParams,
    dep: &Deployment,
    rows: usize,
    cfg: &SearchConfig,
) -> Result<BlockPlan> {
    dep.validate()?;
    check_stages(stages)?;
    if rows == 0 || cfg.max_split == 0 {
        return Err(Error::Config("rows and max_split must be positive".into()));
    }
    let walk = level_walk(stages, params, dep)?;
    let (predicted_cost, layers) = best_chain(stages, &walk, params, dep, cfg, 1, rows)
        .ok_or_else(|| Error::Infeasible(format!("no split chain fits {rows} rows")))?;
    Ok(BlockPlan {
        batch: rows,
        layers,
        predicted_cost,
        feasible: true,
    })
}

/// Searches batch size and split chain. With `n_hint` the batch is fixed
/// to it and only the row split `q` and the chain are searched.
pub fn plan_search(
    stages: &[StageShape],
    params: &HeParams,
    dep: &Deployment,
    n_hint: Option<usize>,
    cfg: &SearchConfig,
) -> Result<BlockPlan> {
    dep.validate()?;
    check_stages(stages)?;
    if cfg.max_split == 0 {
        return Err(Error::Config("max_split must be positive".into()));
    }
    let walk = level_walk(stages, params, dep)?;
    let candidates: Vec<(usize, usize, usize)> = match n_hint {
        None => free_batch_candidates(params.slot_count)
            .into_iter()
            .map(|n| (n, 1, n))
            .collect(),
        Some(0) => return Err(Error::Config("batch hint must be positive".into())),
        Some(n) => {
            let mut v = Vec::new();
            let mut last = 0;
            for q in 1..=n {
                let n_b = n.div_ceil(q);
                if n_b != last {
                    v.push((n, q, n_b));
                    last = n_b;
                }
            }
            v
        }
    };
    let mut best: Option<(OpCounters, usize, Vec<LayerSplit>)> = None;
    for (batch, q, n_b) in candidates {
        let Some((cost, layers)) = best_chain(stages, &walk, params, dep, cfg, q, n_b) else {
            continue;
        };
        let replace = match &best {
            None => true,
            Some((bc, bb, _)) => {
                cmp_per_sample(cfg.key(&cost), batch, cfg.key(bc), *bb) == Ordering::Less
            }
        };
        if replace {
            best = Some((cost, batch, layers));
        }
    }
    let (predicted_cost, batch, layers) =
        best.ok_or_else(|| Error::Infeasible("no split chain fits the slot capacity".into()))?;
    Ok(BlockPlan {
        batch,
        layers,
        predicted_cost,
        feasible: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{KeyId, Simulator};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn one_layer(d: usize, h: usize) -> Vec<StageShape> {
        vec![StageShape::Linear {
            d_in: d,
            d_out: h,
            bias: false,
        }]
    }

    fn dep1() -> Deployment {
        Deployment::new(Scenario::EncryptedData, 1).unwrap()
    }

    fn plain_weights(
        w: &Matrix,
        p: usize,
        m: usize,
        n: usize,
        compressed: bool,
    ) -> BlockWeights<crate::CipherVec> {
        partition_weights(w, None, p, m, n, compressed).unwrap()
    }

    #[test]
    fn partition_trivial_and_index_oracle() {
        let a = Matrix::from_fn(4, 4, |i, j| (10 * i + j) as f64);
        let single = partition(&a, 1, 1, 16).unwrap();
        assert_eq!(single.blocks[0], pack_matrix(&a, 16).unwrap());
        let b = partition(&a, 2, 2, 16).unwrap();
        for i in 0..2 {
            for k in 0..2 {
                let blk = unpack_batch(b.block(i, k)).unwrap();
                for r in 0..2 {
                    for c in 0..2 {
                        assert_eq!(blk[(r, c)], (10 * (2 * i + r) + 2 * k + c) as f64);
                    }
                }
            }
        }
        assert_eq!(assemble(&b).unwrap(), a);
    }

    #[test]
    fn partition_pads_ragged_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_matrix(&mut rng, 5, 7);
        for (q, p) in [(1, 1), (2, 3), (5, 7), (3, 2)] {
            let b = partition(&a, q, p, 64).unwrap();
            assert_eq!(assemble(&b).unwrap(), a);
        }
        assert!(matches!(
            partition(&a, 1, 1, 16),
            Err(Error::CapacityExceeded { .. })
        ));
    }

    #[test]
    fn block_matmul_grids_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sim = Simulator::new(HeParams::with_full_refresh(32, 3).unwrap()).unwrap();
        let a = rand_matrix(&mut rng, 4, 4);
        let w = rand_matrix(&mut rng, 4, 4);
        let want = a.matmul(&w).unwrap();
        for (q, p, m) in [(1, 1, 1), (2, 2, 2), (1, 2, 1), (2, 1, 2), (4, 4, 4)] {
            let blocks = partition(&a, q, p, 32).unwrap();
            let ct = blocks
                .try_map(|v| sim.encrypt_values(&v, KeyId::Client))
                .unwrap();
            let wb = plain_weights(&w, p, m, 4usize.div_ceil(q), false);
            let out = block_matmul(&sim, &ct, &wb).unwrap();
            let dec = out
                .try_map(|c| Ok(sim.decrypt(&c, KeyId::Client)?.decode()?.to_vec()))
                .unwrap();
            assert!(
                assemble(&dec).unwrap().max_abs_diff(&want).unwrap() < 1e-12,
                "{q}{p}{m}"
            );
        }
    }

    #[test]
    fn identity_weights_reassemble_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sim = Simulator::new(HeParams::with_full_refresh(64, 2).unwrap()).unwrap();
        let a = rand_matrix(&mut rng, 6, 6);
        let blocks = partition(&a, 2, 3, 64)
            .unwrap()
            .try_map(|v| sim.encode(&v))
            .unwrap();
        let out = block_matmul(
            &sim,
            &blocks,
            &plain_weights(&Matrix::identity(6), 3, 2, 3, false),
        )
        .unwrap();
        let dec = out.try_map(|c| sim.decode(&c)).unwrap();
        assert!(assemble(&dec).unwrap().max_abs_diff(&a).unwrap() < 1e-12);
    }

    #[test]
    fn grid_mismatch_is_shape_error() {
        let sim = Simulator::new(HeParams::with_full_refresh(64, 2).unwrap()).unwrap();
        let a = partition(&Matrix::zeros(4, 4), 1, 2, 64)
            .unwrap()
            .try_map(|v| sim.encode(&v))
            .unwrap();
        let w = plain_weights(&Matrix::zeros(4, 4), 1, 1, 4, false);
        assert!(matches!(block_matmul(&sim, &a, &w), Err(Error::Shape(_))));
    }

    #[test]
    fn single_block_cost_examples() {
        let params = HeParams::with_full_refresh(16, 3).unwrap();
        let mk = |compressed| BlockPlan {
            batch: 4,
            layers: vec![LayerSplit {
                q: 1,
                p: 1,
                m: 1,
                diag_count: diag_count(4, compressed),
                compressed,
            }],
            predicted_cost: OpCounters::default(),
            feasible: true,
        };
        let plain = cost_of(&mk(false), &one_layer(4, 4), &params, &dep1()).unwrap();
        assert_eq!((plain.pt_mults, plain.rotations, plain.ct_mults), (4, 3, 0));
        // paired input needs a second copy for wraparound, which 16 slots cannot hold
        assert!(matches!(
            cost_of(&mk(true), &one_layer(4, 4), &params, &dep1()),
            Err(Error::Infeasible(_))
        ));
        let wide = HeParams::with_full_refresh(32, 3).unwrap();
        let comp = cost_of(&mk(true), &one_layer(4, 4), &wide, &dep1()).unwrap();
        assert_eq!((comp.pt_mults, comp.conjugations), (2, 1));
    }

    #[test]
    fn sub_batch_counts_and_padding() {
        let a = Matrix::from_fn(7, 2, |i, j| (i * 2 + j) as f64);
        assert_eq!(sub_batch(&a, 7).len(), 1);
        let parts = sub_batch(&a, 3);
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[2].row(0), a.row(6));
        assert_eq!(parts[2].row(1), &[0.0, 0.0]);
    }

    #[test]
    fn large_slots_pick_single_block() {
        let params = HeParams::with_full_refresh(1 << 12, 4).unwrap();
        let stages = vec![
            StageShape::Linear {
                d_in: 8,
                d_out: 6,
                bias: true,
            },
            StageShape::Activation { degree: 2 },
            StageShape::Linear {
                d_in: 6,
                d_out: 4,
                bias: true,
            },
        ];
        let plan = plan_search(
            &stages,
            &params,
            &dep1(),
            Some(10),
            &SearchConfig::default(),
        )
        .unwrap();
        assert!(plan.layers.iter().all(|l| l.q == 1 && l.p == 1 && l.m == 1));
        assert_eq!(
            plan.predicted_cost,
            cost_of(&plan, &stages, &params, &dep1()).unwrap()
        );
    }

    #[test]
    fn hinted_batch_never_beats_free_optimum() {
        let params = HeParams::with_full_refresh(64, 4).unwrap();
        let stages = vec![
            StageShape::Linear {
                d_in: 8,
                d_out: 8,
                bias: false,
            },
            StageShape::Activation { degree: 3 },
        ];
        let cfg = SearchConfig::default();
        let free = plan_search(&stages, &params, &dep1(), None, &cfg).unwrap();
        for hint in [1, 3, free.batch + 1, 100, 500] {
            let hinted = plan_search(&stages, &params, &dep1(), Some(hint), &cfg).unwrap();
            assert_eq!(hinted.batch, hint);
            let o = cmp_per_sample(
                cfg.key(&hinted.predicted_cost),
                hint,
                cfg.key(&free.predicted_cost),
                free.batch,
            );
            assert_ne!(o, Ordering::Less);
        }
        let big = plan_search(&stages, &params, &dep1(), Some(500), &cfg).unwrap();
        assert!(big.q() > 1);
    }

    #[test]
    fn level_budget_forces_bootstraps() {
        let params = HeParams::new(64, 3, 2, 5).unwrap();
        let stages = vec![
            StageShape::Linear {
                d_in: 4,
                d_out: 4,
                bias: false,
            },
            StageShape::Activation { degree: 1 },
            StageShape::Linear {
                d_in: 4,
                d_out: 4,
                bias: false,
            },
        ];
        let plan =
            plan_search(&stages, &params, &dep1(), Some(4), &SearchConfig::default()).unwrap();
        // 1 + 2 levels fit, the second linear stage needs a refresh
        let blocks = (plan.q() * plan.layers[1].p) as u64;
        assert_eq!(plan.predicted_cost.bootstraps, blocks);
        assert_eq!(plan.predicted_cost.bootstrap_levels, 5 * blocks);
        let deep = vec![
            StageShape::Activation { degree: 63 },
            StageShape::Linear {
                d_in: 4,
                d_out: 4,
                bias: false,
            },
        ];
        assert!(matches!(
            plan_search(&deep, &params, &dep1(), None, &SearchConfig::default()),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn scenario_config_validation() {
        assert!(Deployment::new(Scenario::Collective, 1).is_err());
        assert!(dep1().with_bootstrap(BootstrapMode::Collective).is_err());
        assert!(Deployment::new(Scenario::Collective, 3)
            .unwrap()
            .with_bootstrap(BootstrapMode::Centralized)
            .is_ok());
        assert!(Scenario::try_from(4).is_err());
    }

    #[test]
    fn plan_json_shape() {
        let plan = BlockPlan {
            batch: 3,
            layers: vec![LayerSplit {
                q: 1,
                p: 2,
                m: 1,
                diag_count: 2,
                compressed: false,
            }],
            predicted_cost: OpCounters {
                pt_mults: 4,
                ..Default::default()
            },
            feasible: true,
        };
        let v = serde_json::to_value(&plan).unwrap();
        assert_eq!(v["layers"][0]["diag_count"], 2);
        assert_eq!(v["predicted_cost"]["pt_mults"], 4);
        let back: BlockPlan = serde_json::from_value(v).unwrap();
        assert_eq!(back, plan);
    }
}
