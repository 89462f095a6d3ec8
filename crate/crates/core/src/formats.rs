//! File formats: parameters, models, batches and plans.
//!
//! Every parser takes untrusted text and either returns a validated value
//! or an [`Error::Parse`] / [`Error::Shape`] / [`Error::Config`].

use serde::{Deserialize, Serialize};

use crate::backend::HeParams;
use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;
use crate::packing::BatchShape;
use crate::pipeline::{Model, ModelSpec, MODEL_FORMAT};
use crate::planner::BlockPlan;

pub const BATCH_FORMAT: u32 = 1;

fn json_err(what: &str) -> impl Fn(serde_json::Error) -> Error + '_ {
    move |e| Error::Parse(format!("{what}: {e}"))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    slot_count: usize,
    max_level: u32,
    post_bootstrap_level: Option<u32>,
    bootstrap_depth_cost: Option<u32>,
}

/// `{"slot_count": .., "max_level": .., "post_bootstrap_level": .., "bootstrap_depth_cost": ..}`
/// with the last two optional. A missing depth cost defaults to the levels
/// a centralized bootstrap gives up relative to a full refresh.
pub fn parse_params(text: &str) -> Result<HeParams> {
    let raw: RawParams = serde_json::from_str(text).map_err(json_err("params"))?;
    let post = raw.post_bootstrap_level.unwrap_or(raw.max_level);
    let cost = raw
        .bootstrap_depth_cost
        .unwrap_or(raw.max_level.saturating_sub(post));
    HeParams::new(raw.slot_count, raw.max_level, post, cost)
}

pub fn parse_model_spec(text: &str) -> Result<ModelSpec> {
    #[derive(Deserialize)]
    struct Probe {
        format: u32,
    }
    let probe: Probe = serde_json::from_str(text).map_err(json_err("model"))?;
    if probe.format != MODEL_FORMAT {
        return Err(Error::Parse(format!(
            "unsupported model format {}",
            probe.format
        )));
    }
    serde_json::from_str(text).map_err(json_err("model"))
}

pub fn parse_model(text: &str) -> Result<Model> {
    Model::compile(parse_model_spec(text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchFile {
    pub format: u32,
    /// Optional `{n, h, r, c}` header, checked against the samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<BatchShape>,
    pub samples: Vec<Vec<f64>>,
}

fn batch_matrix(rows: &[Vec<f64>]) -> Result<Matrix> {
    if rows.is_empty() {
        return Err(shape_err("batch has no samples"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(shape_err("batch contains non-finite values"));
    }
    let m = Matrix::from_rows(rows)?;
    if m.cols() == 0 {
        return Err(shape_err("samples have no features"));
    }
    Ok(m)
}

/// `{"format": 1, "samples": [[..], ..]}`, one flattened sample per row.
pub fn parse_batch_json(text: &str) -> Result<Matrix> {
    let f: BatchFile = serde_json::from_str(text).map_err(json_err("batch"))?;
    if f.format != BATCH_FORMAT {
        return Err(Error::Parse(format!(
            "unsupported batch format {}",
            f.format
        )));
    }
    let m = batch_matrix(&f.samples)?;
    if let Some(sh) = f.shape {
        let sh = BatchShape::new(sh.n, sh.h, sh.r, sh.c)?;
        if sh.n != m.rows() || sh.features() != m.cols() {
            return Err(shape_err(format!(
                "header says {}x{}x{}x{}, samples are {}x{}",
                sh.n,
                sh.h,
                sh.r,
                sh.c,
                m.rows(),
                m.cols()
            )));
        }
    }
    Ok(m)
}

/// One sample per line, comma separated, no header. `#` starts a comment line.
pub fn parse_batch_csv(text: &str) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("batch csv: {e}")))?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("batch csv record {}: {f:?}: {e}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    batch_matrix(&rows)
}

/// Picks the batch parser from the file contents.
pub fn parse_batch(text: &str) -> Result<Matrix> {
    if text.trim_start().starts_with('{') {
        parse_batch_json(text)
    } else {
        parse_batch_csv(text)
    }
}

pub fn batch_to_json(m: &Matrix) -> String {
    serde_json::to_string(&BatchFile {
        format: BATCH_FORMAT,
        shape: None,
        samples: m.to_rows(),
    })
    .expect("batch serialises")
}

/// Structural checks only; fit against a model is checked by the cost model.
pub fn parse_plan(text: &str) -> Result<BlockPlan> {
    let plan: BlockPlan = serde_json::from_str(text).map_err(json_err("plan"))?;
    if plan.batch == 0 || plan.layers.is_empty() {
        return Err(Error::Parse(
            "plan needs a positive batch and at least one layer".into(),
        ));
    }
    let q = plan.layers[0].q;
    if plan
        .layers
        .iter()
        .any(|l| l.q != q || l.q == 0 || l.p == 0 || l.m == 0 || l.diag_count == 0)
    {
        return Err(Error::Parse(
            "plan splits must be positive with a uniform q".into(),
        ));
    }
    Ok(plan)
}

pub fn plan_to_json(plan: &BlockPlan) -> String {
    serde_json::to_string_pretty(plan).expect("plan serialises")
}
