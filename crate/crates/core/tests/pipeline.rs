use std::fs;
use std::path::Path;

use xai_eval::metrics::read_scores_csv;
use xai_eval::pipeline::*;

fn params() -> MethodParams {
    MethodParams { ig_steps: 16, gs_samples: 8, fp_patch: 4, fp_repeats: 2, ..Default::default() }
}

fn gen(root: &Path) {
    let config = GenDataConfig {
        seed: Some(5),
        n_images: 12,
        height: 16,
        width: 16,
        out: Some(root.join("data")),
        ..Default::default()
    };
    cmd_gen_data(&config).unwrap();
}

fn explain(root: &Path, dir: &str, model_seed: Option<u64>) -> ExplainConfig {
    let mut methods: Vec<String> = ExplainConfig::default().methods;
    methods.extend([CONTROL_PERFECT.to_string(), CONTROL_RANDOM.to_string()]);
    let config = ExplainConfig {
        seed: Some(3),
        manifest: Some(root.join("data/manifest.json")),
        model: model_seed.is_none().then(|| root.join("data/model")),
        model_seed,
        model_id: dir.into(),
        methods,
        params: params(),
        out: Some(root.join(dir)),
        ..Default::default()
    };
    cmd_explain(&config).unwrap();
    config
}

fn evaluate(root: &Path, explained: &str, out: &str) -> EvaluateConfig {
    let config = EvaluateConfig {
        seeds: vec![1, 2],
        manifest: Some(root.join("data/manifest.json")),
        explanations: Some(root.join(explained)),
        images_per_seed: 8,
        out: Some(root.join(out)),
        ..Default::default()
    };
    cmd_evaluate(&config).unwrap();
    config
}

#[test]
fn desk_run_produces_consistent_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    gen(root);
    for f in ["manifest.json", "dataset_stats.json", "run_summary.json", "model/topology.json"] {
        assert!(root.join("data").join(f).is_file(), "{f}");
    }

    explain(root, "explain_a", None);
    let manifest = ExplainManifest::load(&root.join("explain_a")).unwrap();
    assert_eq!(manifest.methods.len(), 7);
    assert_eq!(manifest.entries.len(), 12 * 7);

    evaluate(root, "explain_a", "eval_a");
    let rows = read_scores_csv(fs::File::open(root.join("eval_a/scores.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2 * 8 * 7);
    for r in rows.iter().filter(|r| r.method_id == CONTROL_PERFECT) {
        assert_eq!(r.rra, 1.0, "{}", r.image_id);
        assert!(r.p_pos > 1.0 - 1e-9 && r.p_neg == 0.0);
    }
    for f in ["scores.jsonl", "aggregate.csv", "aggregate.json", "run_summary.json"] {
        assert!(root.join("eval_a").join(f).is_file(), "{f}");
    }

    let summary: RunSummary =
        serde_json::from_str(&fs::read_to_string(root.join("eval_a/run_summary.json")).unwrap()).unwrap();
    assert_eq!(summary.provenance.seeds, [1, 2]);
    assert!(summary.outputs.iter().any(|o| o.path == "scores.csv" && o.sha256.len() == 64));
}

#[test]
fn runs_are_bitwise_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    gen(root);
    explain(root, "x1", None);
    explain(root, "x2", None);
    for m in ExplainManifest::load(&root.join("x1")).unwrap().entries {
        let a = fs::read(root.join("x1").join(&m.heatmap_path)).unwrap();
        let b = fs::read(root.join("x2").join(&m.heatmap_path)).unwrap();
        assert_eq!(a, b, "{}", m.heatmap_path);
    }
    evaluate(root, "x1", "e1");
    evaluate(root, "x1", "e2");
    assert_eq!(fs::read(root.join("e1/scores.csv")).unwrap(), fs::read(root.join("e2/scores.csv")).unwrap());
}

#[test]
fn sanity_and_compare_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    gen(root);
    let sanity = SanityConfig {
        seed: Some(4),
        manifest: Some(root.join("data/manifest.json")),
        model: Some(root.join("data/model")),
        batch: 4,
        methods: vec!["saliency".into(), "grad_cam".into(), CONTROL_CONSTANT.into()],
        params: params(),
        out: Some(root.join("sanity")),
        ..Default::default()
    };
    cmd_sanity(&sanity).unwrap();
    let csv = fs::read_to_string(root.join("sanity/sanity.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let constant = csv.lines().find(|l| l.contains(CONTROL_CONSTANT)).unwrap();
    let fields: Vec<&str> = constant.split(',').collect();
    assert_eq!(fields[2].parse::<f64>().unwrap(), 0.0);
    assert_eq!(fields[4].parse::<f64>().unwrap(), 0.0);
    assert_eq!(fs::read_to_string(root.join("sanity/sanity_per_image.csv")).unwrap().lines().count(), 1 + 3 * 4);

    explain(root, "a", None);
    explain(root, "b", Some(99));
    evaluate(root, "a", "ea");
    evaluate(root, "b", "eb");
    let compare = CompareConfig {
        seed: Some(8),
        scores: vec![root.join("ea"), root.join("eb/scores.csv")],
        n_boot: 50,
        out: Some(root.join("cmp")),
        ..Default::default()
    };
    let summary = cmd_compare(&compare).unwrap();
    assert_eq!(summary.counts["tests"], 2 * 7);
    let text = fs::read_to_string(root.join("cmp/comparison.csv")).unwrap();
    assert!(text.starts_with("group,metric,method_id,test_name"));
    assert_eq!(text.lines().count(), 1 + 14);
    assert!(text.lines().skip(1).all(|l| l.contains("mann_whitney_u") && l.contains("a;b")));
    let rankings = fs::read_to_string(root.join("cmp/rankings.csv")).unwrap();
    assert_eq!(rankings.lines().count(), 1 + 14 * 2);

    let missing = CompareConfig { scores: vec![root.join("ea"), root.join("nope")], ..compare };
    assert_eq!(cmd_compare(&missing).unwrap_err().exit_code(), 3);
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let no_manifest = ExplainConfig {
        seed: Some(1),
        manifest: Some(root.join("missing.json")),
        model_seed: Some(1),
        out: Some(root.join("o")),
        ..Default::default()
    };
    assert_eq!(cmd_explain(&no_manifest).unwrap_err().exit_code(), 3);
    let both = ExplainConfig { model: Some(root.join("m")), ..no_manifest.clone() };
    gen(root);
    let both = ExplainConfig { manifest: Some(root.join("data/manifest.json")), ..both };
    assert_eq!(cmd_explain(&both).unwrap_err().exit_code(), 2);
    assert!(RunConfig::from_toml("[evaluate]\nseeds = [1, 2]\nimages_per_seed = 3\n").is_ok());
}

fn write_scores(path: &Path, model: &str, shift: f64) {
    let mut text = String::from("image_id,model_id,method_id,seed,rra,p_pos,p_neg,dpp\n");
    for i in 0..20 {
        for method in ["saliency", "grad_cam"] {
            let v = ((i * 7 % 20) as f64 / 20.0 + shift).min(1.0);
            text.push_str(&format!("img_{i},{model},{method},0,{v},{v},{v},{v}\n"));
        }
    }
    fs::write(path, text).unwrap();
}

#[test]
fn identical_groups_are_not_significant() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    write_scores(&root.join("a.csv"), "m", 0.0);
    write_scores(&root.join("b.csv"), "m", 0.0);
    let config = CompareConfig {
        seed: Some(1),
        scores: vec![root.join("a.csv"), root.join("b.csv")],
        n_boot: 100,
        out: Some(root.join("out")),
        ..Default::default()
    };
    assert_eq!(cmd_compare(&config).unwrap().counts["significant"], 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("out/comparison.json")).unwrap()).unwrap();
    let results = report["results"].as_array().unwrap();
    assert_eq!(results.len(), 4);
    for r in results {
        assert!(r["p_adjusted"].as_f64().unwrap() > 0.99, "{r}");
        assert_eq!(r["effect_kind"], "cliffs_delta");
        assert_eq!(r["group_ids"], serde_json::json!(["m", "m_2"]));
    }
}

#[test]
fn four_groups_use_kruskal_wallis_and_adjust_jointly() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let paths: Vec<_> = (0..4).map(|k| root.join(format!("g{k}.csv"))).collect();
    for (k, p) in paths.iter().enumerate() {
        write_scores(p, &format!("model{k}"), k as f64 * 0.15);
    }
    let config = CompareConfig {
        seed: Some(2),
        scores: paths,
        metrics: vec!["dpp".into()],
        n_boot: 100,
        out: Some(root.join("out")),
        ..Default::default()
    };
    cmd_compare(&config).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("out/comparison.json")).unwrap()).unwrap();
    let results = report["results"].as_array().unwrap();
    assert_eq!(results.len(), 2);
    let max_raw = results.iter().map(|r| r["p_raw"].as_f64().unwrap()).fold(0.0, f64::max);
    let max_adj = results.iter().map(|r| r["p_adjusted"].as_f64().unwrap()).fold(0.0, f64::max);
    assert!(max_adj >= max_raw);
    for r in results {
        assert_eq!(r["test_name"], "kruskal_wallis");
        assert_eq!(r["effect_kind"], "eta_squared");
    }
    let rankings = report["rankings"].as_array().unwrap();
    let top = rankings.iter().find(|r| r["method_id"] == "grad_cam" && r["rank"] == 1).unwrap();
    assert_eq!(top["group_id"], "model3");
}
