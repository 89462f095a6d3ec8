use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use std::cmp::Ordering;

use hepaas_core::formats::{parse_batch, parse_model, parse_params};
use hepaas_core::planner::{cmp_per_sample, LayerSplit, StageShape};
use hepaas_core::{
    cost_of, infer_plain, ActivationMode, BlockPlan, Deployment, HeParams, OpCounters, Scenario,
    SearchConfig,
};
use tempfile::TempDir;

const MODEL: &str = r#"{"format": 1, "input": {"channels": 1, "rows": 3, "cols": 3}, "layers": [
    {"type": "conv", "kernels": [[[[1, 0], [0, 1]]]], "bias": [0.5]},
    {"type": "activation", "function": "softplus", "degree": 4},
    {"type": "fc", "weights": [[1, 2, 3, 4], [0.5, -1, 0, 1]], "bias": [0, 1]}
]}"#;
const PARAMS: &str = r#"{"slot_count": 256, "max_level": 12, "post_bootstrap_level": 12}"#;
const BATCH: &str = "1,2,3,4,5,6,7,8,9\n0,0,0,1,1,1,0.5,0.5,0.5\n-1,0,1,-1,0,1,-1,0,1\n";

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Fixture {
            dir: TempDir::new().unwrap(),
        };
        f.write("model.json", MODEL);
        f.write("params.json", PARAMS);
        f.write("batch.csv", BATCH);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_hepaas"))
            .current_dir(self.dir.path())
            .args(args)
            .output()
            .unwrap()
    }
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn as_rows(v: &serde_json::Value) -> Vec<Vec<f64>> {
    serde_json::from_value(v.clone()).unwrap()
}

fn oracle() -> Vec<Vec<f64>> {
    let model = parse_model(MODEL).unwrap();
    infer_plain(
        &model,
        &parse_batch(BATCH).unwrap(),
        ActivationMode::Approximated,
    )
    .unwrap()
    .to_rows()
}

fn assert_close(got: &[Vec<f64>], want: &[Vec<f64>], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        assert_eq!(g.len(), w.len());
        for (a, b) in g.iter().zip(w) {
            assert!((a - b).abs() <= tol, "{a} vs {b}");
        }
    }
}

#[test]
fn missing_file_exits_1() {
    let f = Fixture::new();
    let out = f.run(&["plan", "--model", "absent.json", "--params", "params.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_usage_exits_1() {
    let f = Fixture::new();
    assert_eq!(f.run(&["plan"]).status.code(), Some(1));
    assert_eq!(f.run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(f.run(&["--help"]).status.code(), Some(0));
}

#[test]
fn corrupt_model_exits_4() {
    let f = Fixture::new();
    f.write("bad.json", &MODEL[..MODEL.len() / 2]);
    let out = f.run(&["plan", "--model", "bad.json", "--params", "params.json"]);
    assert_eq!(out.status.code(), Some(4));
    f.write(
        "shape.json",
        &MODEL.replace("[0.5, -1, 0, 1]", "[0.5, -1, 0]"),
    );
    let out = f.run(&["plan", "--model", "shape.json", "--params", "params.json"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn single_party_cohort_rejected() {
    let f = Fixture::new();
    let out = f.run(&[
        "run",
        "--scenario",
        "3",
        "--parties",
        "1",
        "--model",
        "model.json",
        "--batch",
        "batch.csv",
        "--params",
        "params.json",
    ]);
    assert!(!out.status.success());
}

#[test]
fn infeasible_plan_exits_2() {
    let f = Fixture::new();
    f.write("tiny.json", r#"{"slot_count": 16, "max_level": 2}"#);
    let out = f.run(&["plan", "--model", "model.json", "--params", "tiny.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn plan_round_trips_into_run() {
    let f = Fixture::new();
    let out = f.run(&[
        "plan",
        "--model",
        "model.json",
        "--params",
        "params.json",
        "--batch-size",
        "3",
        "--out",
        "plan.json",
    ]);
    assert!(out.status.success());
    let plan: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("plan.json")).unwrap()).unwrap();
    assert_eq!(plan["batch"], 3);
    assert_eq!(plan["layers"].as_array().unwrap().len(), 2);

    let out = f.run(&[
        "run",
        "--model",
        "model.json",
        "--batch",
        "batch.csv",
        "--params",
        "params.json",
        "--plan",
        "plan.json",
    ]);
    let doc = stdout_json(&out);
    assert_close(&as_rows(&doc["predictions"]), &oracle(), 1e-6);
    assert_eq!(
        doc["counters"]["ct_mults"].as_u64().unwrap()
            + doc["counters"]["pt_mults"].as_u64().unwrap(),
        plan["predicted_cost"]["ct_mults"].as_u64().unwrap()
            + plan["predicted_cost"]["pt_mults"].as_u64().unwrap()
    );
}

#[test]
fn every_scenario_matches_oracle() {
    let f = Fixture::new();
    let want = oracle();
    for s in ["1", "2", "3"] {
        let out = f.run(&[
            "run",
            "--scenario",
            s,
            "--model",
            "model.json",
            "--batch",
            "batch.csv",
            "--params",
            "params.json",
            "--transcript",
            "t.jsonl",
        ]);
        let doc = stdout_json(&out);
        assert_close(&as_rows(&doc["predictions"]), &want, 1e-6);
        let lines = fs::read_to_string(f.path("t.jsonl")).unwrap();
        let rounds = doc["counters"]["protocol_rounds"].as_u64().unwrap();
        assert_eq!(lines.lines().count() as u64 > 0, rounds > 0, "scenario {s}");
    }
}

#[test]
fn json_batch_accepted() {
    let f = Fixture::new();
    let rows = parse_batch(BATCH).unwrap();
    f.write("batch.json", &hepaas_core::formats::batch_to_json(&rows));
    let out = f.run(&[
        "run",
        "--model",
        "model.json",
        "--batch",
        "batch.json",
        "--params",
        "params.json",
    ]);
    assert_close(&as_rows(&stdout_json(&out)["predictions"]), &oracle(), 1e-6);
}

#[test]
fn bench_csv_is_well_formed() {
    let f = Fixture::new();
    let out = f.run(&[
        "bench",
        "--model",
        "model.json",
        "--params",
        "params.json",
        "--sweep",
        "1,2,256,300",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("batch,total_mults,amortized_mults,bootstraps,rounds")
    );
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r.len(), 5);
        assert!((r[2] - r[1] / r[0]).abs() < 1e-9);
    }
    // 256 fills the best plan, so 300 samples pay for two batches.
    assert_eq!(rows[3][1], 2.0 * rows[2][1]);
}

#[test]
fn approx_reports_fit() {
    let f = Fixture::new();
    let out = f.run(&[
        "approx",
        "--function",
        "sigmoid",
        "--degree",
        "7",
        "--interval",
        "-4,4",
    ]);
    let doc = stdout_json(&out);
    assert_eq!(doc["degree"], 7);
    assert_eq!(doc["coeffs"].as_array().unwrap().len(), 8);
    assert_eq!(doc["interval"][0], -4.0);
    assert!(doc["max_abs_error"].as_f64().unwrap() < 1e-2);
    let out = f.run(&["approx", "--function", "cosh", "--degree", "3"]);
    assert_eq!(out.status.code(), Some(4));
    let out = f.run(&[
        "approx",
        "--function",
        "tanh",
        "--degree",
        "3",
        "--interval",
        "2,-2",
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn missing_batch_detected_before_work() {
    let f = Fixture::new();
    let out = f.run(&[
        "run",
        "--model",
        "model.json",
        "--batch",
        "absent.csv",
        "--params",
        "params.json",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.csv"));
}

#[test]
fn runs_are_deterministic_under_seed() {
    let f = Fixture::new();
    let args = |t: &'static str| {
        vec![
            "run",
            "--scenario",
            "3",
            "--parties",
            "4",
            "--seed",
            "11",
            "--model",
            "model.json",
            "--batch",
            "batch.csv",
            "--params",
            "params.json",
            "--transcript",
            t,
        ]
    };
    let a = f.run(&args("a.jsonl"));
    let b = f.run(&args("b.jsonl"));
    assert!(a.status.success());
    let strip = |o: &Output| {
        let mut v = stdout_json(o);
        v["transcript_path"] = serde_json::Value::Null;
        v
    };
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(
        fs::read(f.path("a.jsonl")).unwrap(),
        fs::read(f.path("b.jsonl")).unwrap()
    );
}

// Every plan for one 2x2 layer at 8 slots, batch and row split included.
fn exhaustive_best(
    params: &HeParams,
    stages: &[StageShape],
    dep: &Deployment,
) -> ([u64; 3], usize) {
    let cfg = SearchConfig::default();
    let mut best: Option<([u64; 3], usize)> = None;
    for batch in 1..=params.slot_count {
        for q in 1..=batch {
            for p in 1..=2 {
                for m in 1..=2 {
                    for compressed in [false, true] {
                        let d_b = 2usize.div_ceil(p);
                        let diag_count = if compressed { d_b.div_ceil(2) } else { d_b };
                        let plan = BlockPlan {
                            batch,
                            layers: vec![LayerSplit {
                                q,
                                p,
                                m,
                                diag_count,
                                compressed,
                            }],
                            predicted_cost: OpCounters::default(),
                            feasible: true,
                        };
                        if let Ok(c) = cost_of(&plan, stages, params, dep) {
                            let key = cfg.key(&c);
                            if best.is_none_or(|(k, b)| {
                                cmp_per_sample(key, batch, k, b) == Ordering::Less
                            }) {
                                best = Some((key, batch));
                            }
                        }
                    }
                }
            }
        }
    }
    best.unwrap()
}

#[test]
fn tiny_plan_matches_exhaustive_minimum() {
    let f = Fixture::new();
    f.write(
        "tiny_model.json",
        r#"{"format": 1, "input": {"channels": 1, "rows": 1, "cols": 2}, "layers": [
            {"type": "fc", "weights": [[1, 2], [3, 4]], "bias": [0, 1]},
            {"type": "activation", "function": "square", "degree": 2}
        ]}"#,
    );
    f.write("tiny_params.json", r#"{"slot_count": 8, "max_level": 4}"#);
    let out = f.run(&[
        "plan",
        "--model",
        "tiny_model.json",
        "--params",
        "tiny_params.json",
    ]);
    let plan: BlockPlan = serde_json::from_value(stdout_json(&out)).unwrap();
    let params = parse_params(r#"{"slot_count": 8, "max_level": 4}"#).unwrap();
    let stages = [
        StageShape::Linear {
            d_in: 2,
            d_out: 2,
            bias: true,
        },
        StageShape::Activation { degree: 2 },
    ];
    let dep = Deployment::new(Scenario::EncryptedData, 1).unwrap();
    let (key, batch) = exhaustive_best(&params, &stages, &dep);
    let cfg = SearchConfig::default();
    assert_eq!(
        cmp_per_sample(cfg.key(&plan.predicted_cost), plan.batch, key, batch),
        Ordering::Equal
    );

    let out = f.run(&[
        "plan",
        "--model",
        "tiny_model.json",
        "--params",
        "tiny_params.json",
        "--batch-size",
        "5",
    ]);
    assert_eq!(stdout_json(&out)["batch"], 5);
}

#[test]
fn bench_minimum_sits_at_planner_batch() {
    let f = Fixture::new();
    let plan = stdout_json(&f.run(&["plan", "--model", "model.json", "--params", "params.json"]));
    let b_star = plan["batch"].as_u64().unwrap() as usize;
    let out = f.run(&[
        "bench",
        "--model",
        "model.json",
        "--params",
        "params.json",
        "--max-batch",
        &(2 * b_star).to_string(),
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows[0][0], 1.0);
    let min = rows.iter().map(|r| r[2]).fold(f64::INFINITY, f64::min);
    assert_eq!(rows[b_star - 1][2], min);
}
