use hiremlp::accounting::{
    ablation_cost_sweep, count_hire_module, count_model, hire_module_closed_form, relative_deviation,
};
use hiremlp::invariants::closed_form_module;
use hiremlp::network::{Model, ModelConfig};
use proptest::prelude::*;

const TOL: f64 = 0.05;

fn totals(name: &str) -> (f64, f64) {
    let model = Model::<f32>::zeroed(&ModelConfig::builtin(name).unwrap()).unwrap();
    let r = count_model(&model, 224, 224).unwrap();
    (r.params as f64, r.flops as f64)
}

#[test]
fn variant_budgets_at_224() {
    // published totals: params, flops
    for (name, params, flops) in [
        ("tiny", 18e6, 2.1e9),
        ("small", 33.11e6, 4.24e9),
        ("base", 58e6, 8.1e9),
        ("large", 96e6, 13.4e9),
    ] {
        let (p, f) = totals(name);
        assert!(relative_deviation(p, params) < TOL, "{name}: params {p}");
        assert!(relative_deviation(f, flops) < TOL, "{name}: flops {f}");
        let cfg = ModelConfig::builtin(name).unwrap();
        assert!(cfg.reconstructed);
        let reference = cfg.reference.unwrap();
        assert_eq!((reference.params as f64, reference.flops as f64), (params, flops));
    }
}

#[test]
fn fc_sweep_follows_published_ordering() {
    let sweep = ablation_cost_sweep(&ModelConfig::builtin("small").unwrap(), &[1, 2, 3, 4], 224, 224).unwrap();
    let p: Vec<f64> = sweep.iter().map(|(_, r)| r.params as f64).collect();
    let f: Vec<f64> = sweep.iter().map(|(_, r)| r.flops as f64).collect();
    for (got, want) in p.iter().zip([49.65e6, 33.11e6, 32.98e6, 33.26e6]) {
        assert!(relative_deviation(*got, want) < TOL, "{got} vs {want}");
    }
    for (got, want) in f.iter().zip([5.65e9, 4.24e9, 4.23e9, 4.24e9]) {
        assert!(relative_deviation(*got, want) < TOL, "{got} vs {want}");
    }
    assert!(p[0] > p[1] && p[0] > p[3]);
    assert!(p[1] > p[2] && p[3] > p[2]);
    assert!(f[0] > f[1]);
}

#[test]
fn per_stage_hire_subtotals_reconcile() {
    // 384 = 32 * 12 keeps every stage extent divisible by its regions
    let cfg = ModelConfig::builtin("small").unwrap();
    let model = Model::<f32>::zeroed(&cfg).unwrap();
    let report = count_model(&model, 384, 384).unwrap();
    for (i, s) in cfg.stages.iter().enumerate() {
        let extent = 384 / [4, 8, 16, 32][i];
        let stage = report.filter(&format!("stages.{i}")).filter_component("hire");
        let (p, f) = hire_module_closed_form(s.h as u64, s.w as u64, s.channels as u64, extent as u64, extent as u64);
        assert_eq!(stage.weights(), p * s.depth as u64, "stage {i}");
        assert_eq!(stage.flops, f * s.depth as u64, "stage {i}");
    }
}

#[test]
fn params_are_resolution_independent_and_flops_scale() {
    let model = Model::<f32>::zeroed(&ModelConfig::builtin("tiny").unwrap()).unwrap();
    let a = count_model(&model, 224, 224).unwrap();
    let b = count_model(&model, 256, 256).unwrap();
    assert_eq!(a.params, b.params);
    assert!(b.flops > a.flops);
    let mixing = |r: &hiremlp::accounting::CostReport| r.filter_component("hire").flops + r.filter_component("mlp").flops;
    let c = count_model(&model, 384, 384).unwrap();
    let d = count_model(&model, 768, 384).unwrap();
    assert_eq!(mixing(&d), 2 * mixing(&c));
}

#[test]
fn json_report_has_contract_keys() {
    let model = Model::<f32>::zeroed(&ModelConfig::micro(3)).unwrap();
    let r = count_model(&model, 32, 32).unwrap();
    let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(v["params"].as_u64(), Some(r.params));
    assert_eq!(v["flops"].as_u64(), Some(r.flops));
    let rows = v["breakdown"].as_array().unwrap();
    assert_eq!(rows.len(), r.breakdown.len());
    let sum: u64 = rows.iter().map(|e| e["params"].as_u64().unwrap()).sum();
    assert_eq!(sum, r.params);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn closed_form_equals_traversal(h in 1usize..6, w in 1usize..6, half in 1usize..24, gh in 1usize..6, gw in 1usize..6) {
        let c = 2 * half;
        let m = closed_form_module(h, w, c).unwrap();
        let r = count_hire_module(&m, h * gh, w * gw).unwrap();
        let (p, f) = hire_module_closed_form(h as u64, w as u64, c as u64, (h * gh) as u64, (w * gw) as u64);
        prop_assert_eq!(r.weights(), p);
        prop_assert_eq!(r.flops, f);
    }
}
