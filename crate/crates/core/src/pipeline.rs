//! Model description, plaintext reference inference and the scenario runners.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::{
    eval_cheb_encrypted, fit_activation, ActivationFn, ChebApprox, DEFAULT_INTERVAL,
};
use crate::backend::{CipherVec, HeParams, KeyId, OpCounters, SimdBackend, Simulator};
use crate::conv::{
    channel_bias, cross_correlate, pool_direct, pool_plan, pool_spec, toeplitz_from_kernel,
    ConvSpec, Kernels, PoolKind,
};
use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;
use crate::mpc::{
    cbootstrap, ckeyswitch, obvdec, AccessEvent, Bus, Cohort, ObvDecOptions, Party, TranscriptEntry,
};
use crate::planner::{
    assemble, block_matmul, cost_of, free_batch_candidates, partition, partition_compressed,
    partition_weights, plan_for_rows, plan_search, sub_batch, BlockMatrix, BlockPlan, BlockWeights,
    BootstrapMode, Deployment, Scenario, SearchConfig, StageShape,
};

pub const MODEL_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
}

impl InputShape {
    pub fn features(&self) -> usize {
        self.channels
            .saturating_mul(self.rows)
            .saturating_mul(self.cols)
    }
}

/// Largest feature count a model layer may have.
pub const MAX_FEATURES: usize = 1 << 16;
/// Largest dense weight matrix a convolution or pooling layer may lower to.
pub const MAX_LOWERED_WEIGHTS: usize = 1 << 24;

fn check_lowered(idx: usize, cs: &ConvSpec) -> Result<()> {
    let cells = cs.in_features().saturating_mul(cs.out_features());
    if cells > MAX_LOWERED_WEIGHTS {
        return Err(shape_err(format!(
            "layer {idx}: lowers to a {}x{} matrix, above the {MAX_LOWERED_WEIGHTS} entry limit",
            cs.in_features(),
            cs.out_features()
        )));
    }
    Ok(())
}

fn default_interval() -> (f64, f64) {
    DEFAULT_INTERVAL
}

fn unit_stride() -> (usize, usize) {
    (1, 1)
}

/// One layer as written in a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    /// `y = x W^T + b` with `weights` given as `d_out` rows of `d_in`.
    Fc {
        weights: Vec<Vec<f64>>,
        #[serde(default)]
        bias: Option<Vec<f64>>,
    },
    /// `kernels[k][ch]` is the `fh x fw` filter of kernel `k` on input channel `ch`.
    Conv {
        kernels: Vec<Vec<Vec<Vec<f64>>>>,
        #[serde(default = "unit_stride")]
        stride: (usize, usize),
        #[serde(default)]
        bias: Option<Vec<f64>>,
    },
    Pool {
        kind: PoolKind,
        window: (usize, usize),
        #[serde(default)]
        stride: Option<(usize, usize)>,
    },
    Activation {
        function: ActivationFn,
        degree: usize,
        #[serde(default = "default_interval")]
        interval: (f64, f64),
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub format: u32,
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
}

/// A layer lowered for encrypted evaluation.
#[derive(Debug, Clone)]
pub enum Stage {
    /// `d_in x d_out` matrix applied on the right.
    Linear {
        weights: Matrix,
        bias: Option<Vec<f64>>,
    },
    Activation {
        function: ActivationFn,
        approx: ChebApprox,
    },
}

impl Stage {
    pub fn shape(&self) -> StageShape {
        match self {
            Stage::Linear { weights, bias } => StageShape::Linear {
                d_in: weights.rows(),
                d_out: weights.cols(),
                bias: bias.is_some(),
            },
            Stage::Activation { approx, .. } => StageShape::Activation {
                degree: approx.degree,
            },
        }
    }
}

/// A validated model: the file description, per-layer input shapes and the lowered stages.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    shapes: Vec<InputShape>,
    pub stages: Vec<Stage>,
}

fn finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(shape_err(format!("{what} contains non-finite values")))
    }
}

fn kernels_of(raw: &[Vec<Vec<Vec<f64>>>]) -> Result<Kernels> {
    raw.iter()
        .map(|filters| {
            filters
                .iter()
                .map(|f| {
                    finite(&f.concat(), "kernel")?;
                    Matrix::from_rows(f)
                })
                .collect()
        })
        .collect()
}

impl Model {
    pub fn compile(spec: ModelSpec) -> Result<Self> {
        if spec.format != MODEL_FORMAT {
            return Err(Error::Parse(format!(
                "unsupported model format {}",
                spec.format
            )));
        }
        if spec.layers.is_empty() {
            return Err(shape_err("model has no layers"));
        }
        let mut cur = spec.input;
        if cur.features() == 0 {
            return Err(shape_err("input shape must be positive"));
        }
        let mut shapes = Vec::with_capacity(spec.layers.len());
        let mut stages = Vec::with_capacity(spec.layers.len());
        for (idx, layer) in spec.layers.iter().enumerate() {
            if cur.features() > MAX_FEATURES {
                return Err(shape_err(format!(
                    "layer {idx}: {} input features exceed {MAX_FEATURES}",
                    cur.features()
                )));
            }
            shapes.push(cur);
            let ctx = |e: Error| match e {
                Error::Shape(m) => Error::Shape(format!("layer {idx}: {m}")),
                other => other,
            };
            let (stage, next) = match layer {
                LayerSpec::Fc { weights, bias } => {
                    let w = Matrix::from_rows(weights).map_err(ctx)?;
                    if w.rows() == 0 || w.cols() != cur.features() {
                        return Err(shape_err(format!(
                            "layer {idx}: fc expects {} inputs, weights have {}",
                            cur.features(),
                            w.cols()
                        )));
                    }
                    finite(w.as_slice(), "weights").map_err(ctx)?;
                    if let Some(b) = bias {
                        finite(b, "bias").map_err(ctx)?;
                        if b.len() != w.rows() {
                            return Err(shape_err(format!(
                                "layer {idx}: {} biases for {} outputs",
                                b.len(),
                                w.rows()
                            )));
                        }
                    }
                    let out = InputShape {
                        channels: 1,
                        rows: 1,
                        cols: w.rows(),
                    };
                    (
                        Stage::Linear {
                            weights: w.transpose(),
                            bias: bias.clone(),
                        },
                        out,
                    )
                }
                LayerSpec::Conv {
                    kernels,
                    stride,
                    bias,
                } => {
                    let k = kernels_of(kernels).map_err(ctx)?;
                    let filter = k
                        .first()
                        .and_then(|f| f.first())
                        .map(|m| (m.rows(), m.cols()))
                        .unwrap_or((0, 0));
                    let cs =
                        ConvSpec::new(cur.channels, k.len(), filter, (cur.rows, cur.cols), *stride)
                            .map_err(ctx)?;
                    check_lowered(idx, &cs)?;
                    let plan = toeplitz_from_kernel(cs, &k).map_err(ctx)?;
                    let b = match bias {
                        Some(b) => {
                            finite(b, "bias").map_err(ctx)?;
                            Some(channel_bias(&cs, b).map_err(ctx)?)
                        }
                        None => None,
                    };
                    let (oh, ow) = cs.output();
                    (
                        Stage::Linear {
                            weights: plan.matrix,
                            bias: b,
                        },
                        InputShape {
                            channels: k.len(),
                            rows: oh,
                            cols: ow,
                        },
                    )
                }
                LayerSpec::Pool {
                    kind,
                    window,
                    stride,
                } => {
                    let stride = stride.unwrap_or(*window);
                    check_lowered(
                        idx,
                        &pool_spec(cur.channels, *window, stride, (cur.rows, cur.cols))
                            .map_err(ctx)?,
                    )?;
                    let plan =
                        pool_plan(*kind, *window, stride, cur.channels, (cur.rows, cur.cols))
                            .map_err(ctx)?;
                    let (oh, ow) = plan.spec.output();
                    (
                        Stage::Linear {
                            weights: plan.matrix,
                            bias: None,
                        },
                        InputShape {
                            channels: cur.channels,
                            rows: oh,
                            cols: ow,
                        },
                    )
                }
                LayerSpec::Activation {
                    function,
                    degree,
                    interval,
                } => {
                    let approx = fit_activation(*function, *interval, *degree)?;
                    (
                        Stage::Activation {
                            function: *function,
                            approx,
                        },
                        cur,
                    )
                }
            };
            stages.push(stage);
            cur = next;
        }
        if cur.features() > MAX_FEATURES {
            return Err(shape_err(format!(
                "output has {} features, above {MAX_FEATURES}",
                cur.features()
            )));
        }
        if !stages.iter().any(|s| matches!(s, Stage::Linear { .. })) {
            return Err(shape_err("model needs at least one fc, conv or pool layer"));
        }
        Ok(Self {
            spec,
            shapes,
            stages,
        })
    }

    pub fn input_features(&self) -> usize {
        self.spec.input.features()
    }

    pub fn output_features(&self) -> usize {
        match self.stages.iter().rev().find_map(|s| match s {
            Stage::Linear { weights, .. } => Some(weights.cols()),
            Stage::Activation { .. } => None,
        }) {
            Some(d) => d,
            None => self.input_features(),
        }
    }

    pub fn stage_shapes(&self) -> Vec<StageShape> {
        self.stages.iter().map(Stage::shape).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationMode {
    Exact,
    Approximated,
}

fn channels_of(x: &[f64], s: InputShape) -> Result<Vec<Matrix>> {
    let plane = s.rows * s.cols;
    (0..s.channels)
        .map(|ch| Matrix::from_vec(s.rows, s.cols, x[ch * plane..(ch + 1) * plane].to_vec()))
        .collect()
}

/// Layer-by-layer reference on an `n x d` batch, evaluated directly from
/// the layer definitions (direct convolution, `x W^T + b`).
pub fn infer_plain(model: &Model, batch: &Matrix, mode: ActivationMode) -> Result<Matrix> {
    if batch.cols() != model.input_features() {
        return Err(shape_err(format!(
            "batch has {} features, model expects {}",
            batch.cols(),
            model.input_features()
        )));
    }
    let mut rows: Vec<Vec<f64>> = batch.to_rows();
    for ((layer, stage), shape) in model
        .spec
        .layers
        .iter()
        .zip(&model.stages)
        .zip(&model.shapes)
    {
        rows = rows
            .into_iter()
            .map(|x| -> Result<Vec<f64>> {
                Ok(match (layer, stage) {
                    (LayerSpec::Fc { weights, bias }, _) => weights
                        .iter()
                        .enumerate()
                        .map(|(o, w)| {
                            w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()
                                + bias.as_ref().map_or(0.0, |b| b[o])
                        })
                        .collect(),
                    (
                        LayerSpec::Conv {
                            kernels,
                            stride,
                            bias,
                        },
                        _,
                    ) => {
                        let k = kernels_of(kernels)?;
                        let filter = (k[0][0].rows(), k[0][0].cols());
                        let cs = ConvSpec::new(
                            shape.channels,
                            k.len(),
                            filter,
                            (shape.rows, shape.cols),
                            *stride,
                        )?;
                        let out = cross_correlate(&cs, &channels_of(&x, *shape)?, &k)?;
                        out.iter()
                            .enumerate()
                            .flat_map(|(kk, ch)| {
                                let b = bias.as_ref().map_or(0.0, |b| b[kk]);
                                ch.as_slice().iter().map(move |v| v + b).collect::<Vec<_>>()
                            })
                            .collect()
                    }
                    (
                        LayerSpec::Pool {
                            kind,
                            window,
                            stride,
                        },
                        _,
                    ) => {
                        let out = pool_direct(
                            *kind,
                            *window,
                            stride.unwrap_or(*window),
                            &channels_of(&x, *shape)?,
                        )?;
                        out.iter().flat_map(|ch| ch.as_slice().to_vec()).collect()
                    }
                    (LayerSpec::Activation { function, .. }, Stage::Activation { approx, .. }) => {
                        match mode {
                            ActivationMode::Exact => x.iter().map(|&v| function.eval(v)).collect(),
                            ActivationMode::Approximated => {
                                x.iter().map(|&v| approx.eval(v)).collect()
                            }
                        }
                    }
                    (LayerSpec::Activation { .. }, Stage::Linear { .. }) => {
                        unreachable!("stages mirror layers")
                    }
                })
            })
            .collect::<Result<_>>()?;
    }
    Matrix::from_rows(&rows)
}

// ---------------------------------------------------------------------------
// Encrypted evaluation

/// Runs the stages over a block grid. `refresh` restores the level of one
/// block; while `plain` holds, blocks are unencrypted and get re-encoded instead.
fn evaluate<B: SimdBackend>(
    be: &B,
    stages: &[Stage],
    weights: &[Option<BlockWeights<B::Ct>>],
    mut cur: BlockMatrix<B::Ct>,
    refresh: &mut dyn FnMut(&B::Ct) -> Result<B::Ct>,
    mut plain: bool,
) -> Result<BlockMatrix<B::Ct>> {
    for (idx, (stage, w)) in stages.iter().zip(weights).enumerate() {
        let need = match stage {
            Stage::Linear { .. } => 1,
            Stage::Activation { approx, .. } => approx.depth_cost,
        };
        let level = be.level(&cur.blocks[0].data);
        if level < need {
            for blk in &mut cur.blocks {
                blk.data = if plain {
                    be.encode(&be.decode(&blk.data)?)?
                } else {
                    refresh(&blk.data)?
                };
            }
            let restored = be.level(&cur.blocks[0].data);
            if restored < need {
                return Err(Error::Infeasible(format!(
                    "stage {idx} needs {need} levels, refresh gives {restored}"
                )));
            }
        }
        cur = match stage {
            Stage::Linear { .. } => {
                plain = false;
                block_matmul(
                    be,
                    &cur,
                    w.as_ref().expect("weights for every linear stage"),
                )?
            }
            Stage::Activation { approx, .. } => {
                let blocks = cur
                    .blocks
                    .par_iter()
                    .map(|b| eval_cheb_encrypted(be, b, approx))
                    .collect::<Result<_>>()?;
                BlockMatrix { blocks, ..cur }
            }
        };
    }
    Ok(cur)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub parties: u32,
    pub params: HeParams,
    /// `None` searches for a plan.
    pub plan: Option<BlockPlan>,
    /// `None` picks collective refresh in scenario 3, centralized otherwise.
    pub bootstrap: Option<BootstrapMode>,
    pub search: SearchConfig,
    pub seed: u64,
    /// Cohort members that never answer.
    pub offline: Vec<usize>,
    pub obvdec: ObvDecOptions,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, params: HeParams) -> Self {
        Self {
            scenario,
            parties: 3,
            params,
            plan: None,
            bootstrap: None,
            search: SearchConfig::default(),
            seed: 0,
            offline: Vec::new(),
            obvdec: ObvDecOptions::default(),
        }
    }

    pub fn deployment(&self) -> Result<Deployment> {
        let d = Deployment::new(self.scenario, self.parties)?;
        match self.bootstrap {
            Some(mode) => d.with_bootstrap(mode),
            None => Ok(d),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub predictions: Matrix,
    pub counters: OpCounters,
    /// Cost model prediction for all sub-batches.
    pub predicted: OpCounters,
    pub plan: BlockPlan,
    pub sub_batches: usize,
    pub transcript: Vec<TranscriptEntry>,
    pub audit: Vec<AccessEvent>,
    /// Key layers the provider saw while stripping its layer, one per delivered block.
    pub provider_views: Vec<Vec<KeyId>>,
}

/// Plan used when the configuration does not fix one. Batches smaller than
/// the free optimum get whichever is cheapest in total: a plan sized to them,
/// a single-block plan padded to a larger row count, or the free plan.
pub fn auto_plan(model: &Model, cfg: &ScenarioConfig, samples: usize) -> Result<BlockPlan> {
    Serving::new(&model.stage_shapes(), cfg)?.plan(samples)
}

/// Padding a batch up to a row count that tiles the slots exactly can skip
/// replication, so a larger block is sometimes cheaper than a sized one.
struct Serving<'a> {
    shapes: &'a [StageShape],
    cfg: &'a ScenarioConfig,
    dep: Deployment,
    free: BlockPlan,
    padded: Vec<BlockPlan>,
}

impl<'a> Serving<'a> {
    fn new(shapes: &'a [StageShape], cfg: &'a ScenarioConfig) -> Result<Self> {
        let dep = cfg.deployment()?;
        let free = plan_search(shapes, &cfg.params, &dep, None, &cfg.search)?;
        let rows: Vec<usize> = free_batch_candidates(cfg.params.slot_count)
            .into_iter()
            .filter(|&r| r < free.batch)
            .collect();
        let padded = rows
            .par_iter()
            .map(
                |&r| match plan_for_rows(shapes, &cfg.params, &dep, r, &cfg.search) {
                    Ok(p) => Ok(Some(p)),
                    Err(Error::Infeasible(_)) => Ok(None),
                    Err(e) => Err(e),
                },
            )
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        Ok(Self {
            shapes,
            cfg,
            dep,
            free,
            padded,
        })
    }

    fn plan(&self, samples: usize) -> Result<BlockPlan> {
        if samples == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if samples >= self.free.batch {
            return Ok(self.free.clone());
        }
        let sized = match plan_search(
            self.shapes,
            &self.cfg.params,
            &self.dep,
            Some(samples),
            &self.cfg.search,
        ) {
            Ok(p) => Some(p),
            Err(Error::Infeasible(_)) => None,
            Err(e) => return Err(e),
        };
        let mut padded: Vec<&BlockPlan> =
            self.padded.iter().filter(|p| p.batch > samples).collect();
        padded.sort_by_key(|p| p.batch);
        let best = sized
            .iter()
            .chain(padded)
            .chain(std::iter::once(&self.free))
            .min_by_key(|p| self.cfg.search.key(&p.predicted_cost))
            .expect("free plan is always a candidate");
        Ok(best.clone())
    }
}

/// Cost of serving `batch` samples the way [`run_scenario`] would.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SweepPoint {
    pub batch: usize,
    pub plan_batch: usize,
    pub sub_batches: usize,
    pub total: OpCounters,
}

impl SweepPoint {
    pub fn amortized_mults(&self) -> f64 {
        self.total.total_mults() as f64 / self.batch as f64
    }
}

/// Predicted counters for each batch size, including sub-batching.
pub fn batch_sweep(
    model: &Model,
    cfg: &ScenarioConfig,
    batches: &[usize],
) -> Result<Vec<SweepPoint>> {
    let shapes = model.stage_shapes();
    let serving = Serving::new(&shapes, cfg)?;
    batches
        .iter()
        .map(|&n| {
            let plan = serving.plan(n)?;
            let sub_batches = n.div_ceil(plan.batch);
            Ok(SweepPoint {
                batch: n,
                plan_batch: plan.batch,
                sub_batches,
                total: plan.predicted_cost.scaled(sub_batches as u64),
            })
        })
        .collect()
}

fn prepare_weights(
    model: &Model,
    plan: &BlockPlan,
    encrypt: &impl Fn(&[crate::C64]) -> Result<CipherVec>,
    encrypted: bool,
) -> Result<Vec<Option<BlockWeights<CipherVec>>>> {
    let n_b = plan.block_rows();
    let mut li = 0;
    model
        .stages
        .iter()
        .map(|st| match st {
            Stage::Linear { weights, bias } => {
                let sp = plan.layers[li];
                li += 1;
                let w =
                    partition_weights(weights, bias.as_deref(), sp.p, sp.m, n_b, sp.compressed)?;
                Ok(Some(if encrypted {
                    w.encrypt_with(encrypt)?
                } else {
                    w
                }))
            }
            Stage::Activation { .. } => Ok(None),
        })
        .collect()
}

/// Runs the model on `batch` (`N x d`) under the configured deployment.
pub fn run_scenario(cfg: &ScenarioConfig, model: &Model, batch: &Matrix) -> Result<ScenarioResult> {
    if batch.cols() != model.input_features() || batch.rows() == 0 {
        return Err(shape_err(format!(
            "batch is {}x{}, model expects samples of {} features",
            batch.rows(),
            batch.cols(),
            model.input_features()
        )));
    }
    let dep = cfg.deployment()?;
    let plan = match &cfg.plan {
        Some(p) => p.clone(),
        None => auto_plan(model, cfg, batch.rows())?,
    };
    let per_batch = cost_of(&plan, &model.stage_shapes(), &cfg.params, &dep)?;
    let sim = Simulator::new(cfg.params)?;
    let mut bus = Bus::new(cfg.seed);
    let mut client = Party::client();
    let provider = Party::provider();
    let mut cohort = match dep.scenario {
        Scenario::Collective => Some(Cohort::new(dep.parties)?),
        _ => None,
    };
    if let Some(c) = cohort.as_mut() {
        for &i in &cfg.offline {
            if i >= c.size() as usize {
                return Err(Error::Config(format!(
                    "offline member {i} is outside the cohort"
                )));
            }
            c.set_online(i, false);
        }
    }
    let data_key = match dep.scenario {
        Scenario::EncryptedData => Some(KeyId::Client),
        Scenario::EncryptedModel => None,
        Scenario::Collective => Some(KeyId::Collective(dep.parties)),
    };
    let weight_key = match dep.scenario {
        Scenario::EncryptedData => KeyId::Provider,
        Scenario::EncryptedModel => KeyId::Provider,
        Scenario::Collective => KeyId::Collective(dep.parties),
    };
    let weights = prepare_weights(
        model,
        &plan,
        &|v| sim.encrypt_values(v, weight_key),
        dep.scenario.encrypted_weights(),
    )?;

    let first = plan.layers[0];
    let chunks = sub_batch(batch, plan.batch);
    let mut outputs = Vec::with_capacity(chunks.len());
    let mut provider_views = Vec::new();
    for chunk in &chunks {
        let packed = if first.compressed {
            partition_compressed(chunk, plan.q(), first.p, cfg.params.slot_count)?
        } else {
            partition(chunk, plan.q(), first.p, cfg.params.slot_count)?
        };
        let input = packed.try_map(|v| match data_key {
            Some(k) => sim.encrypt_values(&v, k),
            None => sim.encode(&v),
        })?;
        let mut refresh = |ct: &CipherVec| -> Result<CipherVec> {
            match (dep.bootstrap, cohort.as_ref()) {
                (BootstrapMode::Collective, Some(c)) => cbootstrap(&sim, &mut bus, c, ct),
                _ => sim.bootstrap(ct),
            }
        };
        let out = evaluate(
            &sim,
            &model.stages,
            &weights,
            input,
            &mut refresh,
            data_key.is_none(),
        )?;
        let clear = match dep.scenario {
            Scenario::EncryptedData => out.try_map(|ct| client.open(&sim, &ct, &mut bus))?,
            Scenario::EncryptedModel => out.try_map(|ct| {
                let o = obvdec(&sim, &mut bus, &ct, &mut client, &provider, cfg.obvdec)?;
                provider_views.push(o.provider_view_layers);
                Ok(o.values)
            })?,
            Scenario::Collective => {
                let c = cohort.as_ref().expect("cohort in scenario 3");
                out.try_map(|ct| {
                    let switched = ckeyswitch(&sim, &mut bus, c, &ct, KeyId::Client)?;
                    client.open(&sim, &switched, &mut bus)
                })?
            }
        };
        outputs.push(assemble(&clear)?);
    }
    let mut rows = Vec::with_capacity(batch.rows());
    for m in &outputs {
        rows.extend(m.to_rows());
    }
    rows.truncate(batch.rows());
    Ok(ScenarioResult {
        predictions: Matrix::from_rows(&rows)?,
        counters: sim.counters(),
        predicted: per_batch.scaled(chunks.len() as u64),
        plan,
        sub_batches: chunks.len(),
        transcript: bus.transcript().to_vec(),
        audit: bus.audit().to_vec(),
        provider_views,
    })
}
