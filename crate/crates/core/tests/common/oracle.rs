//! Tiny-model values against the frozen reference bundle.

use std::collections::BTreeSet;

use super::*;
use icl_scope::attribution::{ablation_sweep, position_report, score_sweep, InContextHeads};
use icl_scope::icl::{attention_mass_report, evaluate_accuracy, Label};
use icl_scope::interventions::{build_plan, Amplification};
use icl_scope::kernels::{self, Tensor};
use icl_scope::{HeadId, InterventionPlan, Lens, TraceConfig};

const TOL: f32 = 1e-4;

fn all_heads() -> Vec<HeadId> {
    (0..2).flat_map(|l| (0..2).map(move |h| HeadId::new(l, h))).collect()
}

pub fn logits_and_layer_snapshots() {
    let b = bundle();
    let m = tiny_model();
    for case in b["cases"].as_array().unwrap() {
        let ids = ids(&case["ids"]);
        let out = m.forward(&ids, &TraceConfig::all(), &InterventionPlan::default()).unwrap();
        assert_close(out.logits.data(), &floats(&case["logits"]), TOL, "logits");
        for (l, layer) in case["layers"].as_array().unwrap().iter().enumerate() {
            assert_close(out.trace.layer_input(l).unwrap(), &floats(&layer["input_last"]), TOL, "layer input");
            assert_close(out.trace.block_output(l).unwrap(), &floats(&layer["attn_out_last"]), TOL, "block output");
        }
    }
}

pub fn per_head_internals() {
    let b = bundle();
    let m = tiny_model();
    let (foo, bar) = (b["foo_id"].as_u64().unwrap() as u32, b["bar_id"].as_u64().unwrap() as u32);
    let lens = Lens::new(&m);
    let lens_ln = Lens::new(&m).with_final_ln(true);
    for case in b["cases"].as_array().unwrap() {
        let ids = ids(&case["ids"]);
        let t = ids.len();
        let out = m.forward(&ids, &TraceConfig::all(), &InterventionPlan::default()).unwrap();
        let tr = &out.trace;
        for (l, layer) in case["layers"].as_array().unwrap().iter().enumerate() {
            for (h, e) in layer["heads"].as_array().unwrap().iter().enumerate() {
                let full = tr.full_attention(l, h).unwrap();
                assert_close(full.data(), &floats(&e["alpha"]), TOL, "alpha");
                let vo: Vec<f32> = (0..t).flat_map(|p| tr.value_output(l, h, p).unwrap().to_vec()).collect();
                assert_close(&vo, &floats(&e["vo"]), TOL, "vo");
                assert_close(tr.head_output(l, h).unwrap(), &floats(&e["o_last"]), TOL, "o");

                let s = |lens: &Lens, id| lens.head_score(tr, l, h, id).unwrap();
                assert!((s(&lens, foo) - e["score_foo"].as_f64().unwrap() as f32).abs() < TOL);
                assert!((s(&lens, bar) - e["score_bar"].as_f64().unwrap() as f32).abs() < TOL);
                assert!((s(&lens_ln, foo) - e["score_foo_final_ln"].as_f64().unwrap() as f32).abs() < TOL);

                let mw: Vec<f32> = (0..t).map(|p| lens.logit_minus(tr, l, h, p, foo, bar, true).unwrap()).collect();
                let mu: Vec<f32> = (0..t).map(|p| lens.logit_minus(tr, l, h, p, foo, bar, false).unwrap()).collect();
                assert_close(&mw, &floats(&e["minus_weighted"]), TOL, "weighted logit minus");
                assert_close(&mu, &floats(&e["minus_unweighted"]), TOL, "logit minus");

                for (key, ln) in [("o_last_top3", &lens), ("o_last_top3_final_ln", &lens_ln)] {
                    let proj = ln.project(tr.head_output(l, h).unwrap(), 3).unwrap();
                    let want = e[key].as_array().unwrap();
                    for (got, w) in proj.entries.iter().zip(want) {
                        assert_eq!(got.id as u64, w[0].as_u64().unwrap(), "{key} ids");
                        assert!((got.prob - w[1].as_f64().unwrap() as f32).abs() < TOL, "{key} probs");
                    }
                }
            }
        }
        let lp = &case["log_prob"];
        let v = floats(&lp["v"]);
        let tok = lp["token"].as_u64().unwrap() as u32;
        assert!((lens.log_prob(&v, tok).unwrap() - lp["log_prob"].as_f64().unwrap() as f32).abs() < TOL);
        assert!((lens_ln.log_prob(&v, tok).unwrap() - lp["log_prob_final_ln"].as_f64().unwrap() as f32).abs() < TOL);
    }
}

pub fn stripped_attention_and_delta() {
    let b = bundle();
    let m = tiny_model();
    let plan = build_plan([], None, all_heads()).unwrap();
    for case in b["cases"].as_array().unwrap() {
        let ids = ids(&case["ids"]);
        let out = m.forward(&ids, &TraceConfig::all(), &plan).unwrap();
        let tr = &out.trace;
        for (l, layer) in case["layers"].as_array().unwrap().iter().enumerate() {
            for (h, e) in layer["heads"].as_array().unwrap().iter().enumerate() {
                let a = tr.stripped_attention(l, h).unwrap();
                assert_close(a, &floats(&e["stripped_alpha"]), TOL, "stripped alpha");
                let mut delta = vec![0.0f32; 8];
                for (p, &w) in a.iter().enumerate() {
                    for (d, v) in delta.iter_mut().zip(tr.value_output(l, h, p).unwrap()) {
                        *d += w * v;
                    }
                }
                for (d, o) in delta.iter_mut().zip(tr.head_output(l, h).unwrap()) {
                    *d -= o;
                }
                assert_close(&delta, &floats(&e["strip_delta"]), TOL, "strip delta");
            }
        }
    }
}

pub fn intervention_logits() {
    let b = bundle();
    let m = tiny_model();
    let iv = &b["interventions"];
    let ids0 = ids(&b["cases"][0]["ids"]);
    let last = |plan: &InterventionPlan| {
        m.forward_last(&ids0, &TraceConfig::disabled(), plan).unwrap().last_logits().to_vec()
    };
    let h = HeadId::new;

    let cases: Vec<(&str, InterventionPlan)> = vec![
        ("ablate_0_1", build_plan([h(0, 1)], None, []).unwrap()),
        ("ablate_all", build_plan(all_heads(), None, []).unwrap()),
        ("strip_layer1", build_plan([], None, [h(1, 0), h(1, 1)]).unwrap()),
        ("strip_all", build_plan([], None, all_heads()).unwrap()),
        ("ablate_0_1_strip_1_0", build_plan([h(0, 1)], None, [h(1, 0)]).unwrap()),
    ];
    for (key, plan) in cases {
        assert_close(&last(&plan), &floats(&iv[key]), TOL, key);
    }

    let spec = &iv["amplify_spec"];
    let heads: BTreeSet<HeadId> = spec["heads"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| h(x[0].as_u64().unwrap() as usize, x[1].as_u64().unwrap() as usize))
        .collect();
    for (key, a_c) in [("amplify_ac_0.0", 0.0), ("amplify_ac_0.03", 0.03)] {
        let amp = Amplification {
            a_c,
            a_v: spec["a_v"].as_f64().unwrap() as f32,
            heads: heads.clone(),
            minority: Label::Foo,
            positions: usizes(&spec["positions"]),
        };
        let plan = build_plan([], Some(amp), []).unwrap();
        assert_close(&last(&plan), &floats(&iv[key]), TOL, key);
    }

    let zeroed = m.with_zero_positions();
    let out = zeroed
        .forward(&ids0, &TraceConfig::all(), &build_plan([], None, [h(1, 0)]).unwrap())
        .unwrap();
    assert_close(
        out.trace.stripped_attention(1, 0).unwrap(),
        &floats(&iv["strip_zero_positions_alpha_l1h0"]),
        TOL,
        "stripped alpha with zero positions",
    );
}

pub fn sweeps_grid_and_mass() {
    let b = bundle();
    let m = tiny_model();
    let sw = &b["sweep"];
    let prompts = sweep_prompts(&b);
    let (foo, bar) = (b["foo_id"].as_u64().unwrap() as u32, b["bar_id"].as_u64().unwrap() as u32);

    let abl = ablation_sweep(&m, &prompts, 1..2).unwrap();
    assert_eq!(abl.base.foo, Some(sw["base_accuracy"]["foo"].as_f64().unwrap() as f32));
    assert_eq!(abl.base.bar, Some(sw["base_accuracy"]["bar"].as_f64().unwrap() as f32));
    let scores = score_sweep(&m, &prompts, 1..2).unwrap();
    for (want, (row, s)) in sw["ablation"].as_array().unwrap().iter().zip(abl.rows.iter().zip(&scores)) {
        assert_eq!(row.layer as u64, want["layer"].as_u64().unwrap());
        assert_eq!(row.head as u64, want["head"].as_u64().unwrap());
        let f = |k: &str| want[k].as_f64().unwrap() as f32;
        assert!((row.effect_foo - f("effect_foo")).abs() < TOL);
        assert!((row.effect_bar - f("effect_bar")).abs() < TOL);
        assert!((row.effect - f("effect_all")).abs() < TOL);
        assert!((s.mean_s_foo.unwrap() - f("mean_score_foo")).abs() < TOL);
        assert!((s.mean_s_bar.unwrap() - f("mean_score_bar")).abs() < TOL);
    }

    let foo_acc = evaluate_accuracy(
        &m,
        &prompts.iter().filter(|p| p.correct == Label::Foo).cloned().collect::<Vec<_>>(),
        &InterventionPlan::default(),
    )
    .unwrap();
    assert_eq!(foo_acc, 1.0);

    let heads = InContextHeads {
        fooheads: [HeadId::new(1, 1)].into(),
        barheads: [HeadId::new(1, 0)].into(),
    };
    let foo_prompts: Vec<_> = prompts.iter().filter(|p| p.correct == Label::Foo).cloned().collect();
    let grid = position_report(&m, &foo_prompts, &heads, foo, bar).unwrap();
    for (name, cell) in [
        ("foohead_foo", &grid.foohead_foo),
        ("foohead_bar", &grid.foohead_bar),
        ("barhead_foo", &grid.barhead_foo),
        ("barhead_bar", &grid.barhead_bar),
    ] {
        let w = &sw["grid"][name];
        let g = |k: &str| w[k].as_f64().unwrap() as f32;
        assert!((cell.minus_weighted.unwrap() - g("minus_weighted")).abs() < TOL, "{name}");
        assert!((cell.minus.unwrap() - g("minus")).abs() < TOL, "{name}");
        assert!((cell.attn.unwrap() - g("attn")).abs() < TOL, "{name}");
    }
    assert!((grid.label_share.unwrap() - sw["label_share"].as_f64().unwrap() as f32).abs() < TOL);

    let mass = attention_mass_report(&m, &foo_prompts, &heads, |_| Ok(InterventionPlan::default())).unwrap();
    assert!((mass.foo.unwrap() - sw["attention_mass"]["foohead"].as_f64().unwrap() as f32).abs() < TOL);
    assert!((mass.bar.unwrap() - sw["attention_mass"]["barhead"].as_f64().unwrap() as f32).abs() < TOL);
}

pub fn kernel_values() {
    let k = &bundle()["kernels"];
    let a = Tensor::new(vec![4, 5], floats(&k["matmul"]["a"])).unwrap();
    let b = Tensor::new(vec![5, 3], floats(&k["matmul"]["b"])).unwrap();
    assert_close(kernels::matmul(&a, &b).unwrap().data(), &floats(&k["matmul"]["out"]), TOL, "matmul");
    assert_close(
        &kernels::softmax_row(&floats(&k["softmax"]["x"]), None).unwrap(),
        &floats(&k["softmax"]["out"]),
        1e-6,
        "softmax",
    );
    let ln = &k["layer_norm"];
    let got = kernels::layer_norm(
        &floats(&ln["x"]),
        &floats(&ln["gain"]),
        &floats(&ln["bias"]),
        ln["eps"].as_f64().unwrap() as f32,
    )
    .unwrap();
    assert_close(&got, &floats(&ln["out"]), TOL, "layer_norm");
    assert_close(&kernels::gelu(&floats(&k["gelu"]["x"])).unwrap(), &floats(&k["gelu"]["out"]), 1e-5, "gelu");
}
