use hepaas_core::formats::{parse_batch, parse_model, parse_params, parse_plan, plan_to_json};
use hepaas_core::pipeline::batch_sweep;
use hepaas_core::{infer_plain, run_scenario, ActivationMode, Error, Scenario, ScenarioConfig};
use proptest::prelude::*;

const LENET_ISH: &str = r#"{
    "format": 1,
    "input": {"channels": 2, "rows": 5, "cols": 5},
    "layers": [
        {"type": "conv", "kernels": [
            [[[0.2, -0.1], [0.05, 0.3]], [[-0.2, 0.1], [0.1, 0.0]]],
            [[[0.0, 0.4], [-0.3, 0.1]], [[0.25, 0.25], [-0.1, 0.2]]]
        ], "stride": [1, 1], "bias": [0.1, -0.05]},
        {"type": "activation", "function": "silu", "degree": 15},
        {"type": "pool", "kind": "average", "window": [2, 2]},
        {"type": "fc", "weights": [
            [0.1, -0.2, 0.3, 0.1, -0.1, 0.2, 0.0, 0.05],
            [-0.3, 0.2, 0.1, 0.0, 0.2, -0.1, 0.1, 0.1]
        ], "bias": [0.0, 0.2]}
    ]
}"#;

fn batch_csv(n: usize) -> String {
    (0..n)
        .map(|k| {
            (0..50)
                .map(|j| format!("{:.3}", ((k * 50 + j) as f64 * 0.37).sin()))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn file_formats_through_every_scenario() {
    let model = parse_model(LENET_ISH).unwrap();
    assert_eq!(model.input_features(), 50);
    let batch = parse_batch(&batch_csv(6)).unwrap();
    let params =
        parse_params(r#"{"slot_count": 1024, "max_level": 8, "post_bootstrap_level": 6}"#).unwrap();
    let approx = infer_plain(&model, &batch, ActivationMode::Approximated).unwrap();
    let exact = infer_plain(&model, &batch, ActivationMode::Exact).unwrap();
    // degree 15 SiLU is close to exact on this range
    assert!(approx.max_abs_diff(&exact).unwrap() < 1e-2);
    for scenario in [
        Scenario::EncryptedData,
        Scenario::EncryptedModel,
        Scenario::Collective,
    ] {
        let res = run_scenario(&ScenarioConfig::new(scenario, params), &model, &batch).unwrap();
        assert!(
            res.predictions.max_abs_diff(&approx).unwrap() < 1e-9,
            "{scenario:?}"
        );
        assert_eq!(res.counters, res.predicted, "{scenario:?}");
        assert!(res.audit.iter().all(|e| e.granted));
    }
}

#[test]
fn saved_plan_replays_identically() {
    let model = parse_model(LENET_ISH).unwrap();
    let batch = parse_batch(&batch_csv(5)).unwrap();
    let params = parse_params(r#"{"slot_count": 512, "max_level": 8}"#).unwrap();
    let mut cfg = ScenarioConfig::new(Scenario::EncryptedData, params);
    let first = run_scenario(&cfg, &model, &batch).unwrap();
    cfg.plan = Some(parse_plan(&plan_to_json(&first.plan)).unwrap());
    let second = run_scenario(&cfg, &model, &batch).unwrap();
    assert_eq!(first.predictions, second.predictions);
    assert_eq!(first.counters, second.counters);
}

#[test]
fn plan_for_other_model_is_rejected() {
    let model = parse_model(LENET_ISH).unwrap();
    let params = parse_params(r#"{"slot_count": 512, "max_level": 8}"#).unwrap();
    let mut cfg = ScenarioConfig::new(Scenario::EncryptedData, params);
    let plan = run_scenario(&cfg, &model, &parse_batch(&batch_csv(2)).unwrap())
        .unwrap()
        .plan;
    let mut bad = plan.clone();
    bad.layers.pop();
    cfg.plan = Some(bad);
    assert!(run_scenario(&cfg, &model, &parse_batch(&batch_csv(2)).unwrap()).is_err());
}

#[test]
fn offline_member_aborts_scenario_three() {
    let model = parse_model(LENET_ISH).unwrap();
    let params = parse_params(r#"{"slot_count": 512, "max_level": 8}"#).unwrap();
    let mut cfg = ScenarioConfig::new(Scenario::Collective, params);
    cfg.parties = 4;
    cfg.offline = vec![2];
    let err = run_scenario(&cfg, &model, &parse_batch(&batch_csv(2)).unwrap()).unwrap_err();
    assert!(matches!(err, Error::ProtocolAborted(_)), "{err}");
}

#[test]
fn sweep_totals_scale_with_sub_batches() {
    let model = parse_model(LENET_ISH).unwrap();
    let params = parse_params(r#"{"slot_count": 256, "max_level": 8}"#).unwrap();
    let cfg = ScenarioConfig::new(Scenario::EncryptedData, params);
    let points = batch_sweep(&model, &cfg, &[1, 2, 3, 10, 40]).unwrap();
    for p in &points {
        assert_eq!(p.sub_batches, p.batch.div_ceil(p.plan_batch));
        let single = batch_sweep(&model, &cfg, &[p.plan_batch]).unwrap()[0];
        assert_eq!(p.total, single.total.scaled(p.sub_batches as u64));
    }
    assert!(matches!(
        batch_sweep(&model, &cfg, &[0]),
        Err(Error::Config(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_fc_models_match_oracle(
        d in 1usize..=6,
        h in 1usize..=5,
        n in 1usize..=12,
        deg in 1usize..=7,
        scenario in 1u8..=3,
        seed in 0u64..1000,
    ) {
        let w = |i: usize, j: usize| (((seed as usize + 3 * i + 7 * j) % 11) as f64 - 5.0) / 10.0;
        let w1: Vec<Vec<f64>> = (0..h).map(|i| (0..d).map(|j| w(i, j)).collect()).collect();
        let w2: Vec<Vec<f64>> = (0..2).map(|i| (0..h).map(|j| w(j, i + 1)).collect()).collect();
        let spec = serde_json::json!({
            "format": 1,
            "input": {"channels": 1, "rows": 1, "cols": d},
            "layers": [
                {"type": "fc", "weights": w1, "bias": vec![0.1; h]},
                {"type": "activation", "function": "tanh", "degree": deg, "interval": [-4, 4]},
                {"type": "fc", "weights": w2, "bias": [0.0, -0.1]}
            ]
        });
        let model = parse_model(&spec.to_string()).unwrap();
        let rows: Vec<String> = (0..n).map(|k| (0..d).map(|j| format!("{}", ((k + j) as f64 * 0.3).cos())).collect::<Vec<_>>().join(",")).collect();
        let batch = parse_batch(&rows.join("\n")).unwrap();
        let params = parse_params(r#"{"slot_count": 64, "max_level": 5, "post_bootstrap_level": 4}"#).unwrap();
        let cfg = ScenarioConfig::new(Scenario::try_from(scenario).unwrap(), params);
        let res = run_scenario(&cfg, &model, &batch).unwrap();
        let want = infer_plain(&model, &batch, ActivationMode::Approximated).unwrap();
        prop_assert!(res.predictions.max_abs_diff(&want).unwrap() < 1e-9);
        prop_assert_eq!(res.counters, res.predicted);
    }
}
